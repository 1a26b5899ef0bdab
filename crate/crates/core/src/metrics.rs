//! Segmentation scores: Dice, average perpendicular distance (APD) between
//! contours, and the conformity index.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::sequence::{Mask, MaskSequence};

fn same_dims(a: &Mask, b: &Mask) -> Result<()> {
    if a.dims() != b.dims() {
        bail!(Shape, "mask dims {:?} vs {:?}", a.dims(), b.dims());
    }
    Ok(())
}

/// `2|a∩b| / (|a|+|b|)`, 1 when both are empty.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    same_dims(a, b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&p, &q) in a.data().iter().zip(b.data()) {
        let (p, q) = (p != 0, q != 0);
        na += usize::from(p);
        nb += usize::from(q);
        inter += usize::from(p && q);
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// `(3d - 2) / d`; `-inf` when `d == 0`.
pub fn conformity(d: f64) -> f64 {
    if d == 0.0 {
        return f64::NEG_INFINITY;
    }
    (3.0 * d - 2.0) / d
}

/// Boundary pixel centres `(row, col)` in raster order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Contour {
    pub points: Vec<(usize, usize)>,
}

impl Contour {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Foreground pixels with at least one background or out-of-image 8-neighbour.
pub fn extract_contour(mask: &Mask) -> Contour {
    let (h, w) = mask.dims();
    let fg = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask.get(y as usize, x as usize) != 0
    };
    let mut points = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) == 0 {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            let boundary = (-1..=1).any(|dy| (-1..=1).any(|dx| (dy, dx) != (0, 0) && !fg(yi + dy, xi + dx)));
            if boundary {
                points.push((y, x));
            }
        }
    }
    Contour { points }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum ApdMode {
    /// Mean of pred→truth and truth→pred.
    #[default]
    Symmetric,
    /// Pred→truth only.
    OneDirectional,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApdOptions {
    /// Pixel spacing `(row, col)` in mm.
    pub spacing_mm: (f64, f64),
    pub mode: ApdMode,
    /// Value returned when exactly one mask is empty; `None` uses the image diagonal.
    pub empty_penalty_mm: Option<f64>,
}

impl ApdOptions {
    pub fn new(spacing_mm: (f64, f64)) -> Self {
        Self { spacing_mm, mode: ApdMode::Symmetric, empty_penalty_mm: None }
    }
}

/// Squared mm distance from every pixel to the nearest `true` feature pixel,
/// computed separably: exact column distances, then a row-wise minimum.
/// `None` when there are no features.
fn squared_distance_map(features: &[bool], h: usize, w: usize, (sy, sx): (f64, f64)) -> Option<Vec<f64>> {
    if !features.iter().any(|&f| f) {
        return None;
    }
    // column pass: squared vertical distance to the nearest feature in the column
    let mut col = vec![f64::INFINITY; h * w];
    for x in 0..w {
        let mut last: Option<usize> = None;
        let mut up = vec![usize::MAX; h];
        for y in 0..h {
            if features[y * w + x] {
                last = Some(y);
            }
            if let Some(l) = last {
                up[y] = y - l;
            }
        }
        let mut next: Option<usize> = None;
        for y in (0..h).rev() {
            if features[y * w + x] {
                next = Some(y);
            }
            let down = next.map_or(usize::MAX, |n| n - y);
            let d = up[y].min(down);
            if d != usize::MAX {
                let a = d as f64 * sy;
                col[y * w + x] = a * a;
            }
        }
    }
    // row pass
    let mut out = vec![f64::INFINITY; h * w];
    for y in 0..h {
        let row = &col[y * w..(y + 1) * w];
        for x in 0..w {
            let mut best = f64::INFINITY;
            for (q, &cv) in row.iter().enumerate() {
                if cv.is_infinite() {
                    continue;
                }
                let b = x.abs_diff(q) as f64 * sx;
                let v = cv + b * b;
                if v < best {
                    best = v;
                }
            }
            out[y * w + x] = best;
        }
    }
    Some(out)
}

fn mean_distance(from: &Contour, to: &Contour, h: usize, w: usize, spacing: (f64, f64)) -> f64 {
    let mut features = vec![false; h * w];
    for &(y, x) in &to.points {
        features[y * w + x] = true;
    }
    let dt = squared_distance_map(&features, h, w, spacing).expect("nonempty contour");
    let total: f64 = from.points.iter().map(|&(y, x)| libm::sqrt(dt[y * w + x])).sum();
    total / from.len() as f64
}

/// Symmetric APD in mm with the image-diagonal penalty for a single empty mask.
pub fn apd(pred: &Mask, truth: &Mask, spacing_mm: (f64, f64)) -> Result<f64> {
    apd_with(pred, truth, &ApdOptions::new(spacing_mm))
}

pub fn apd_with(pred: &Mask, truth: &Mask, opts: &ApdOptions) -> Result<f64> {
    same_dims(pred, truth)?;
    let (h, w) = pred.dims();
    let (cp, ct) = (extract_contour(pred), extract_contour(truth));
    match (cp.is_empty(), ct.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => {
            let (sy, sx) = opts.spacing_mm;
            let diag = libm::sqrt((h as f64 * sy) * (h as f64 * sy) + (w as f64 * sx) * (w as f64 * sx));
            return Ok(opts.empty_penalty_mm.unwrap_or(diag));
        }
        _ => {}
    }
    let forward = mean_distance(&cp, &ct, h, w, opts.spacing_mm);
    Ok(match opts.mode {
        ApdMode::OneDirectional => forward,
        ApdMode::Symmetric => 0.5 * (forward + mean_distance(&ct, &cp, h, w, opts.spacing_mm)),
    })
}

/// JSON has no infinities or NaN: non-finite values are written as the
/// strings `"inf"`, `"-inf"` and `"nan"`.
#[cfg(feature = "serde")]
mod nonfinite {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr<'a> {
        Num(f64),
        Str(&'a str),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str("inf") => Ok(f64::INFINITY),
            Repr::Str("-inf") => Ok(f64::NEG_INFINITY),
            Repr::Str("nan") => Ok(f64::NAN),
            Repr::Str(other) => Err(de::Error::custom(alloc::format!("not a number: {}", other))),
        }
    }
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Stat {
    #[cfg_attr(feature = "serde", serde(with = "nonfinite"))]
    pub mean: f64,
    #[cfg_attr(feature = "serde", serde(with = "nonfinite"))]
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: libm::sqrt(var) }
    }

    /// `mean(std)` with four decimals.
    pub fn cell(&self) -> String {
        format!("{:.4}({:.4})", self.mean, self.std)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FrameMetrics {
    pub dice: f64,
    pub apd_mm: f64,
    #[cfg_attr(feature = "serde", serde(with = "nonfinite"))]
    pub conformity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Summary {
    pub dice: Stat,
    pub apd_mm: Stat,
    pub conformity: Stat,
}

impl Summary {
    pub fn of(frames: &[FrameMetrics]) -> Self {
        let col = |f: fn(&FrameMetrics) -> f64| Stat::of(&frames.iter().map(f).collect::<Vec<_>>());
        Self { dice: col(|m| m.dice), apd_mm: col(|m| m.apd_mm), conformity: col(|m| m.conformity) }
    }

    /// Table cells: DICE, APD (mm), C.
    pub fn cells(&self) -> [String; 3] {
        [self.dice.cell(), self.apd_mm.cell(), self.conformity.cell()]
    }
}

/// Per-frame scores of one sequence and their summary.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricReport {
    pub subject_id: String,
    pub frames: Vec<FrameMetrics>,
    pub summary: Summary,
}

pub fn evaluate_sequence(
    pred: &MaskSequence,
    truth: &MaskSequence,
    opts: &ApdOptions,
    subject_id: &str,
) -> Result<MetricReport> {
    if pred.len() != truth.len() || pred.dims() != truth.dims() {
        bail!(Shape, "prediction {}x{:?} vs truth {}x{:?}", pred.len(), pred.dims(), truth.len(), truth.dims());
    }
    let frames = pred
        .masks()
        .iter()
        .zip(truth.masks())
        .map(|(p, t)| {
            let d = dice(p, t)?;
            Ok(FrameMetrics { dice: d, apd_mm: apd_with(p, t, opts)?, conformity: conformity(d) })
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = Summary::of(&frames);
    Ok(MetricReport { subject_id: subject_id.into(), frames, summary })
}

/// Aggregate over many sequences: every frame pooled, and per-subject means.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DatasetReport {
    pub label: String,
    pub sequences: Vec<MetricReport>,
    pub per_frame: Summary,
    pub per_subject: Summary,
}

impl DatasetReport {
    pub fn new(label: impl Into<String>, sequences: Vec<MetricReport>) -> Self {
        let pooled: Vec<FrameMetrics> = sequences.iter().flat_map(|s| s.frames.iter().copied()).collect();
        let subject_means: Vec<FrameMetrics> = sequences
            .iter()
            .map(|s| FrameMetrics {
                dice: s.summary.dice.mean,
                apd_mm: s.summary.apd_mm.mean,
                conformity: s.summary.conformity.mean,
            })
            .collect();
        Self {
            label: label.into(),
            per_frame: Summary::of(&pooled),
            per_subject: Summary::of(&subject_means),
            sequences,
        }
    }
}

/// Aligned text table with the columns `Algorithms | DICE | APD (mm) | C`.
pub fn format_table(rows: &[(String, Summary)]) -> String {
    let header = ["Algorithms", "DICE (%)", "APD (mm)", "C (%)"];
    let cells: Vec<[String; 4]> = rows
        .iter()
        .map(|(label, s)| {
            let [d, a, c] = s.cells();
            [label.clone(), d, a, c]
        })
        .collect();
    let mut widths = header.map(str::len);
    for r in &cells {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |r: [&str; 4]| {
        let mut s = String::new();
        for (i, (c, w)) in r.iter().zip(widths).enumerate() {
            if i > 0 {
                s.push_str(" | ");
            }
            s.push_str(c);
            s.extend(core::iter::repeat_n(' ', w - c.len()));
        }
        s.truncate(s.trim_end().len());
        s.push('\n');
        s
    };
    let mut out = line(header);
    out.push_str(&line(widths.map(|w| "-".repeat(w)).each_ref().map(|s| s.as_str())));
    for r in &cells {
        out.push_str(&line(r.each_ref().map(|s| s.as_str())));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Mask {
        let mut m = Mask::filled(h, w, 0);
        for &(y, x) in on {
            m.set(y, x, 1);
        }
        m
    }

    #[test]
    fn dice_cases() {
        let a = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let b = mask(4, 4, &[(3, 3)]);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        let c = mask(4, 4, &[(0, 0), (0, 1), (2, 0), (2, 1)]);
        assert_eq!(dice(&a, &c).unwrap(), 0.5);
        let empty = Mask::filled(4, 4, 0);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert!(dice(&a, &Mask::filled(3, 4, 0)).is_err());
    }

    #[test]
    fn contour_cases() {
        assert_eq!(extract_contour(&mask(3, 3, &[(1, 1)])).points, vec![(1, 1)]);
        let square = Mask::filled(3, 3, 1);
        let c = extract_contour(&square);
        assert_eq!(c.len(), 8);
        assert!(!c.points.contains(&(1, 1)));
        let mut inner = Mask::filled(5, 5, 0);
        for y in 1..4 {
            for x in 1..4 {
                inner.set(y, x, 1);
            }
        }
        let c = extract_contour(&inner);
        assert_eq!(c.len(), 8);
        assert!(!c.points.contains(&(2, 2)));
        assert!(extract_contour(&Mask::filled(4, 4, 0)).is_empty());
    }

    #[test]
    fn apd_cases() {
        let a = mask(6, 6, &[(0, 0)]);
        let b = mask(6, 6, &[(3, 4)]);
        assert_eq!(apd(&a, &b, (1.0, 1.0)).unwrap(), 5.0);
        assert_eq!(apd(&a, &a, (1.0, 1.0)).unwrap(), 0.0);
        // anisotropic: 3 rows at 2 mm, 4 cols at 1.5 mm
        assert_eq!(apd(&a, &b, (2.0, 1.5)).unwrap(), libm::sqrt(36.0 + 36.0));
    }

    #[test]
    fn apd_empty_masks() {
        let e = Mask::filled(3, 4, 0);
        let a = mask(3, 4, &[(1, 1)]);
        assert_eq!(apd(&e, &e, (1.0, 1.0)).unwrap(), 0.0);
        assert_eq!(apd(&e, &a, (1.0, 1.0)).unwrap(), 5.0);
        let mut opts = ApdOptions::new((1.0, 1.0));
        opts.empty_penalty_mm = Some(42.0);
        assert_eq!(apd_with(&a, &e, &opts).unwrap(), 42.0);
    }

    #[test]
    fn one_directional_apd() {
        // pred is a single point on truth's contour; the reverse direction is not zero
        let truth = mask(5, 5, &[(1, 1), (1, 2), (1, 3)]);
        let pred = mask(5, 5, &[(1, 1)]);
        let mut opts = ApdOptions::new((1.0, 1.0));
        opts.mode = ApdMode::OneDirectional;
        assert_eq!(apd_with(&pred, &truth, &opts).unwrap(), 0.0);
        assert_eq!(apd(&pred, &truth, (1.0, 1.0)).unwrap(), 0.5 * (0.0 + 1.0));
    }

    #[test]
    fn conformity_cases() {
        assert_eq!(conformity(1.0), 1.0);
        assert!((conformity(0.9745) - 0.947665).abs() < 1e-6);
        assert!(conformity(2.0 / 3.0).abs() < 1e-15);
        assert_eq!(conformity(0.0), f64::NEG_INFINITY);
    }

    #[test]
    fn perfect_sequence_report() {
        let m = MaskSequence::new(vec![mask(4, 4, &[(1, 1), (1, 2)]); 3]).unwrap();
        let r = evaluate_sequence(&m, &m, &ApdOptions::new((1.0, 1.0)), "s").unwrap();
        assert_eq!(r.summary.cells(), ["1.0000(0.0000)", "0.0000(0.0000)", "1.0000(0.0000)"]);
    }

    #[test]
    fn three_frame_aggregation() {
        let truth = MaskSequence::new(vec![mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]); 3]).unwrap();
        let pred = MaskSequence::new(vec![
            mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]),
            mask(4, 4, &[(0, 0), (0, 1), (2, 0), (2, 1)]),
            mask(4, 4, &[(3, 3)]),
        ])
        .unwrap();
        let r = evaluate_sequence(&pred, &truth, &ApdOptions::new((1.0, 1.0)), "s").unwrap();
        // dice 1, 0.5, 0 -> mean 0.5, population std sqrt(1/6)
        assert_eq!(r.summary.dice.mean, 0.5);
        assert!((r.summary.dice.std - libm::sqrt(1.0 / 6.0)).abs() < 1e-15);
        assert_eq!(Stat { mean: 0.9745, std: 0.0163 }.cell(), "0.9745(0.0163)");
    }

    #[test]
    fn table_has_one_line_per_row() {
        let s = Summary::default();
        let t = format_table(&[("FCNN".into(), s), ("T-FCNN+CRFs".into(), s)]);
        assert_eq!(t.lines().count(), 4);
        assert!(t.lines().nth(3).unwrap().starts_with("T-FCNN+CRFs | 0.0000(0.0000)"));
    }
}
