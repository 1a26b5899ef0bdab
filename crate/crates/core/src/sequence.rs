//! Frame, mask and probability sequences plus the geometric plumbing around
//! them (bilinear resize, bounding-box crops, zero padding, dataset splits).

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};

/// Row-major 2-D array.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

pub type Image = Grid<f64>;
pub type Mask = Grid<u8>;

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            bail!(Shape, "empty grid {}x{}", height, width);
        }
        if data.len() != height * width {
            bail!(Shape, "{}x{} grid needs {} values, got {}", height, width, height * width, data.len());
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Sub-window `[y0, y0+h) × [x0, x0+w)`. Panics when it leaves the grid.
    pub fn window(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        Self::from_fn(h, w, |y, x| self.get(y0 + y, x0 + x))
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

/// Pixel box, inclusive-exclusive on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            bail!(InvalidArgument, "degenerate box ({}, {}, {}, {})", x0, y0, x1, y1);
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= width && self.y1 <= height
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }

    /// Smallest box containing both.
    pub fn hull(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    /// Tight bounds of the nonzero pixels, `None` for an empty mask.
    pub fn of_mask(mask: &Mask) -> Option<BoundingBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..mask.height() {
            for x in 0..mask.width() {
                if mask.get(y, x) != 0 {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x1 > 0).then_some(BoundingBox { x0, y0, x1, y1 })
    }

    /// Dilates by `margin` on every side and clamps to a `height × width` image.
    pub fn dilate_clamped(&self, margin: usize, height: usize, width: usize) -> Result<BoundingBox> {
        let b = BoundingBox {
            x0: self.x0.saturating_sub(margin),
            y0: self.y0.saturating_sub(margin),
            x1: (self.x1 + margin).min(width),
            y1: (self.y1 + margin).min(height),
        };
        if b.x0 >= b.x1 || b.y0 >= b.y1 {
            bail!(InvalidArgument, "box ({}, {}, {}, {}) does not intersect a {}x{} image", self.x0, self.y0, self.x1, self.y1, height, width);
        }
        Ok(b)
    }
}

/// One slice position over a cardiac cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct CineSequence {
    frames: Vec<Image>,
    pixel_spacing_mm: (f64, f64),
    subject_id: String,
}

impl CineSequence {
    pub fn new(frames: Vec<Image>, pixel_spacing_mm: (f64, f64), subject_id: impl Into<String>) -> Result<Self> {
        let Some(first) = frames.first() else { bail!(Invariant, "sequence has no frames") };
        let dims = first.dims();
        for (t, f) in frames.iter().enumerate() {
            if f.dims() != dims {
                bail!(Shape, "frame {} is {:?}, frame 0 is {:?}", t, f.dims(), dims);
            }
            if f.data().iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
                bail!(Invariant, "frame {} has intensities outside [0,1]", t);
            }
        }
        let (sy, sx) = pixel_spacing_mm;
        if !(sy > 0.0 && sx > 0.0 && sy.is_finite() && sx.is_finite()) {
            bail!(Invariant, "pixel spacing must be positive, got ({}, {})", sy, sx);
        }
        Ok(Self { frames, pixel_spacing_mm, subject_id: subject_id.into() })
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }

    pub fn pixel_spacing_mm(&self) -> (f64, f64) {
        self.pixel_spacing_mm
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    /// Same frames, reordered by `order` (used to probe frame-order dependence).
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let frames = order.iter().map(|&i| self.frames[i].clone()).collect();
        Self::new(frames, self.pixel_spacing_mm, self.subject_id.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSequence {
    masks: Vec<Mask>,
}

impl MaskSequence {
    pub fn new(masks: Vec<Mask>) -> Result<Self> {
        let Some(first) = masks.first() else { bail!(Invariant, "mask sequence has no frames") };
        let dims = first.dims();
        for (t, m) in masks.iter().enumerate() {
            if m.dims() != dims {
                bail!(Shape, "mask {} is {:?}, mask 0 is {:?}", t, m.dims(), dims);
            }
            if m.data().iter().any(|&v| v > 1) {
                bail!(Invariant, "non-binary mask value in frame {}", t);
            }
        }
        Ok(Self { masks })
    }

    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    pub fn into_masks(self) -> Vec<Mask> {
        self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.masks[0].dims()
    }

    pub fn matches(&self, seq: &CineSequence) -> bool {
        self.len() == seq.len() && self.dims() == seq.dims()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbSequence {
    probs: Vec<Image>,
}

impl ProbSequence {
    pub fn new(probs: Vec<Image>) -> Result<Self> {
        let Some(first) = probs.first() else { bail!(Invariant, "probability sequence has no frames") };
        let dims = first.dims();
        for (t, p) in probs.iter().enumerate() {
            if p.dims() != dims {
                bail!(Shape, "probability map {} is {:?}, map 0 is {:?}", t, p.dims(), dims);
            }
            if p.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                bail!(Invariant, "probability outside [0,1] in frame {}", t);
            }
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[Image] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.probs[0].dims()
    }

    /// Pixels with probability `>= threshold` become foreground.
    pub fn threshold(&self, threshold: f64) -> MaskSequence {
        let masks = self.probs.iter().map(|p| p.map(|v| u8::from(v >= threshold))).collect();
        MaskSequence { masks }
    }
}

/// Bilinear resize with half-pixel-centred sampling and border clamping.
pub fn resize_image(img: &Image, height: usize, width: usize) -> Result<Image> {
    if height < 2 || width < 2 {
        bail!(InvalidArgument, "resize target must be at least 2x2, got {}x{}", height, width);
    }
    let (h, w) = img.dims();
    let (ys, xs) = (h as f64 / height as f64, w as f64 / width as f64);
    let taps = |out: usize, scale: f64, n: usize| {
        let src = ((out as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = libm::floor(src) as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f64)
    };
    let cols: Vec<_> = (0..width).map(|x| taps(x, xs, w)).collect();
    Ok(Image::from_fn(height, width, |y, x| {
        let (y0, y1, fy) = taps(y, ys, h);
        let (x0, x1, fx) = cols[x];
        let top = img.get(y0, x0) * (1.0 - fx) + img.get(y0, x1) * fx;
        let bottom = img.get(y1, x0) * (1.0 - fx) + img.get(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }))
}

/// Resizes every frame; pixel spacing scales by the size ratio.
pub fn resize_sequence(seq: &CineSequence, target: (usize, usize)) -> Result<CineSequence> {
    let (h, w) = seq.dims();
    let frames = seq
        .frames()
        .iter()
        .map(|f| resize_image(f, target.0, target.1).map(|r| r.map(|v| v.clamp(0.0, 1.0))))
        .collect::<Result<Vec<_>>>()?;
    let (sy, sx) = seq.pixel_spacing_mm();
    let spacing = (sy * h as f64 / target.0 as f64, sx * w as f64 / target.1 as f64);
    CineSequence::new(frames, spacing, seq.subject_id())
}

/// Resizes a binary mask by bilinear interpolation of its indicator and a 0.5 cut.
pub fn resize_mask(mask: &Mask, height: usize, width: usize) -> Result<Mask> {
    let soft = resize_image(&mask.map(f64::from), height, width)?;
    Ok(soft.map(|v| u8::from(v >= 0.5)))
}

/// Zero padding of `pad` pixels on every side.
pub fn pad_mask(mask: &Mask, pad: usize) -> Mask {
    let (h, w) = mask.dims();
    let mut out = Mask::filled(h + 2 * pad, w + 2 * pad, 0);
    for y in 0..h {
        for x in 0..w {
            out.set(y + pad, x + pad, mask.get(y, x));
        }
    }
    out
}

/// Crops every frame to `bbox` dilated by `margin`, clamped to the image.
pub fn crop_to_bbox(seq: &CineSequence, bbox: &BoundingBox, margin: usize) -> Result<CineSequence> {
    let (h, w) = seq.dims();
    let b = bbox.dilate_clamped(margin, h, w)?;
    let frames = seq.frames().iter().map(|f| f.window(b.y0, b.x0, b.height(), b.width())).collect();
    CineSequence::new(frames, seq.pixel_spacing_mm(), seq.subject_id())
}

/// Crops masks with the same rule as [`crop_to_bbox`].
pub fn crop_masks(masks: &MaskSequence, bbox: &BoundingBox, margin: usize) -> Result<MaskSequence> {
    let (h, w) = masks.dims();
    let b = bbox.dilate_clamped(margin, h, w)?;
    MaskSequence::new(masks.masks().iter().map(|m| m.window(b.y0, b.x0, b.height(), b.width())).collect())
}

/// Places `patch` into a `height × width` canvas of `fill` with its top-left
/// corner at the box origin. Inverse of a crop.
pub fn paste<T: Copy>(patch: &Grid<T>, bbox: &BoundingBox, height: usize, width: usize, fill: T) -> Result<Grid<T>> {
    if bbox.width() != patch.width() || bbox.height() != patch.height() || !bbox.fits(height, width) {
        bail!(Shape, "patch {:?} does not match box {:?} in {}x{}", patch.dims(), bbox, height, width);
    }
    let mut out = Grid::filled(height, width, fill);
    for y in 0..patch.height() {
        for x in 0..patch.width() {
            out.set(bbox.y0 + y, bbox.x0 + x, patch.get(y, x));
        }
    }
    Ok(out)
}

/// Subject partition that never separates twins.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    /// subject id → twin pair id
    pub pairing: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl DatasetSplit {
    /// Builds the split from explicit per-subject assignments and checks it.
    pub fn from_assignments(assign: &[(String, String, SplitName)]) -> Result<Self> {
        let mut split = DatasetSplit::default();
        for (subject, pair, which) in assign {
            split.pairing.insert(subject.clone(), pair.clone());
            match which {
                SplitName::Train => split.train.push(subject.clone()),
                SplitName::Validation => split.validation.push(subject.clone()),
                SplitName::Test => split.test.push(subject.clone()),
            }
        }
        split.validate()?;
        Ok(split)
    }

    /// Seeded 70/15/15 partition over twin pairs. `subjects` holds
    /// `(subject_id, twin_pair_id)`.
    pub fn partition(subjects: &[(String, String)], seed: u64) -> Result<Self> {
        let mut pairs: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (s, p) in subjects {
            pairs.entry(p.as_str()).or_default().push(s.as_str());
        }
        let mut groups: Vec<Vec<&str>> = pairs.into_values().collect();
        groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = subjects.len();
        let want_train = libm::round(0.70 * n as f64) as usize;
        let want_val = libm::round(0.15 * n as f64) as usize;
        let mut assign = Vec::with_capacity(n);
        let (mut n_train, mut n_val) = (0, 0);
        for g in groups {
            let which = if n_train < want_train.max(1) {
                n_train += g.len();
                SplitName::Train
            } else if n_val < want_val {
                n_val += g.len();
                SplitName::Validation
            } else {
                SplitName::Test
            };
            for s in g {
                let pair = subjects.iter().find(|(id, _)| id == s).map(|(_, p)| p.clone()).unwrap_or_default();
                assign.push((s.to_string(), pair, which));
            }
        }
        Self::from_assignments(&assign)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, SplitName> = BTreeMap::new();
        let lists = [(&self.train, SplitName::Train), (&self.validation, SplitName::Validation), (&self.test, SplitName::Test)];
        for (list, which) in lists {
            for s in list {
                if seen.insert(s.as_str(), which).is_some() {
                    bail!(Invariant, "subject {} appears in more than one split", s);
                }
            }
        }
        let mut pair_split: BTreeMap<&str, SplitName> = BTreeMap::new();
        for (subject, pair) in &self.pairing {
            let Some(&which) = seen.get(subject.as_str()) else { continue };
            if let Some(&prev) = pair_split.get(pair.as_str()) {
                if prev != which {
                    bail!(Invariant, "twin pair separated: {} spans {:?} and {:?}", pair, prev, which);
                }
            }
            pair_split.insert(pair.as_str(), which);
        }
        Ok(())
    }

    pub fn of(&self, which: SplitName) -> &[String] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Validation => &self.validation,
            SplitName::Test => &self.test,
        }
    }
}
