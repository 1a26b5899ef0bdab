//! Single-frame box regressor: three conv/ReLU/max-pool blocks and a linear
//! head to four sigmoid outputs `(x0, y0, x1, y1)` normalized to `[0, 1]`.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{bail, Error, Result};
use crate::nn::ParamSet;
use crate::optim::{Adadelta, AdadeltaConfig};
use crate::sequence::{BoundingBox, Image};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct DetectorConfig {
    pub input_size: (usize, usize),
    pub base_channels: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Frames whose gradients are averaged per update.
    pub batch_size: usize,
    /// Decay the step multiplier linearly from `lr` towards 0 over the epochs.
    pub anneal: bool,
    /// Largest random translation (input pixels) applied to training frames.
    pub max_shift: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { input_size: (64, 64), base_channels: 4, lr: 1.0, epochs: 200, seed: 0, batch_size: 1, anneal: true, max_shift: 8 }
    }
}

const BLOCKS: usize = 3;
const HEAD_INIT_SCALE: f64 = 0.1;

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        let f = 1 << BLOCKS;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            bail!(InvalidArgument, "detector input {}x{} is not divisible by {}", h, w, f);
        }
        if self.base_channels == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            bail!(InvalidArgument, "base_channels, batch_size and lr must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxRegressor {
    cfg: DetectorConfig,
    params: ParamSet,
}

/// Normalized `[x0/W, y0/H, x1/W, y1/H]` of a box.
pub fn normalize_box(b: &BoundingBox, height: usize, width: usize) -> [f64; 4] {
    let (h, w) = (height as f64, width as f64);
    [b.x0 as f64 / w, b.y0 as f64 / h, b.x1 as f64 / w, b.y1 as f64 / h]
}

/// Pixel box from normalized coordinates: clamped to `[0, 1]`, each pair
/// ordered, and at least one pixel wide and tall.
pub fn denormalize_box(c: [f64; 4], height: usize, width: usize) -> BoundingBox {
    let cl = |v: f64| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    let side = |a: f64, b: f64, n: usize| {
        let (lo, hi) = (cl(a).min(cl(b)), cl(a).max(cl(b)));
        let mut p0 = (libm::round(lo * n as f64) as usize).min(n - 1);
        let mut p1 = (libm::round(hi * n as f64) as usize).min(n);
        if p1 <= p0 {
            if p0 < n {
                p1 = p0 + 1;
            } else {
                p0 = n - 1;
                p1 = n;
            }
        }
        (p0, p1)
    };
    let (x0, x1) = side(c[0], c[2], width);
    let (y0, y1) = side(c[1], c[3], height);
    BoundingBox { x0, y0, x1, y1 }
}

/// Intersection over union by pixel area.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

/// Bounding hull of per-frame boxes.
pub fn sequence_box(boxes: &[BoundingBox]) -> Result<BoundingBox> {
    let Some((first, rest)) = boxes.split_first() else {
        bail!(InvalidArgument, "no boxes to combine");
    };
    Ok(rest.iter().fold(*first, |acc, b| acc.hull(b)))
}

/// Translates `frame` by `(dy, dx)` with edge replication and moves `b`
/// along. The offsets must keep `b` inside the frame.
pub fn translate(frame: &Image, b: &BoundingBox, dy: isize, dx: isize) -> (Image, BoundingBox) {
    let (h, w) = frame.dims();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let img = Image::from_fn(h, w, |y, x| frame.get(clamp(y as isize - dy, h), clamp(x as isize - dx, w)));
    let mv = |v: usize, d: isize| (v as isize + d) as usize;
    (img, BoundingBox { x0: mv(b.x0, dx), y0: mv(b.y0, dy), x1: mv(b.x1, dx), y1: mv(b.y1, dy) })
}

/// Random offset in `[-max, max]` that keeps `[lo, hi)` inside `[0, n)`.
fn offset(rng: &mut ChaCha8Rng, max: usize, lo: usize, hi: usize, n: usize) -> isize {
    let a = -(max.min(lo) as isize);
    let b = max.min(n - hi) as isize;
    rng.random_range(a as i64..=b as i64) as isize
}

impl BoxRegressor {
    pub fn build(cfg: &DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();
        let mut cin = 1;
        for k in 0..BLOCKS {
            let c = cfg.base_channels << k;
            params.push_he(format!("trunk{}.weight", k), &[c, cin, 3, 3], cin * 9, &mut rng);
            params.push(format!("trunk{}.bias", k), Tensor::zeros(&[c]));
            cin = c;
        }
        let (h, w) = cfg.input_size;
        let flat = cin * (h >> BLOCKS) * (w >> BLOCKS);
        let head = params.push_he("head.weight", &[4, flat], flat, &mut rng);
        params.get_mut(head).data_mut().iter_mut().for_each(|v| *v *= HEAD_INIT_SCALE);
        params.push("head.bias", Tensor::zeros(&[4]));
        Ok(Self { cfg: cfg.clone(), params })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Records the regressor on one frame; returns the parameter leaves and
    /// the sigmoid output node `[4]`.
    pub fn record(&self, g: &mut Graph, frame: &Image) -> Result<(Vec<NodeId>, NodeId)> {
        let (h, w) = self.cfg.input_size;
        if frame.dims() != (h, w) {
            bail!(Shape, "frame is {:?}, detector expects {:?}", frame.dims(), (h, w));
        }
        let ids = self.params.leaves(g);
        let n = frame.data().len() as f64;
        let mean = frame.data().iter().sum::<f64>() / n;
        let std = libm::sqrt(frame.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).max(1e-6);
        let mut cur = g.leaf(Tensor::new(&[1, h, w], frame.data().iter().map(|v| (v - mean) / std).collect())?);
        for k in 0..BLOCKS {
            let c = g.conv2d(cur, ids[2 * k], Some(ids[2 * k + 1]), 1, 1)?;
            let r = g.relu(c);
            cur = g.maxpool2(r)?;
        }
        let lin = g.linear(cur, ids[2 * BLOCKS], ids[2 * BLOCKS + 1])?;
        let out = g.sigmoid(lin);
        Ok((ids, out))
    }

    /// Normalized coordinates as produced by the network.
    pub fn predict(&self, frame: &Image) -> Result<[f64; 4]> {
        let mut g = Graph::new();
        let (_, out) = self.record(&mut g, frame)?;
        let d = g.value(out).data();
        Ok([d[0], d[1], d[2], d[3]])
    }

    pub fn detect(&self, frame: &Image) -> Result<BoundingBox> {
        let (h, w) = self.cfg.input_size;
        Ok(denormalize_box(self.predict(frame)?, h, w))
    }

    /// Minimizes the mean squared error of normalized coordinates with
    /// Adadelta over mini-batches of a seeded shuffled order, optionally with
    /// a linearly annealed step multiplier. Each frame is
    /// translated by a fresh random offset of at most `max_shift` pixels per
    /// epoch. Returns the mean loss of every epoch.
    pub fn train(&mut self, data: &[(Image, BoundingBox)]) -> Result<Vec<f64>> {
        self.train_with(data, |_, _| {})
    }

    /// As [`BoxRegressor::train`], calling `on_epoch` with the regressor and
    /// the epoch's mean loss after every epoch.
    pub fn train_with(&mut self, data: &[(Image, BoundingBox)], mut on_epoch: impl FnMut(&Self, f64)) -> Result<Vec<f64>> {
        if data.is_empty() {
            bail!(InvalidArgument, "no detector training frames");
        }
        let (h, w) = self.cfg.input_size;
        if let Some((f, b)) = data.iter().find(|(f, b)| f.dims() != (h, w) || !b.fits(h, w)) {
            bail!(Shape, "training frame {:?} with box {:?} does not match input {:?}", f.dims(), b, (h, w));
        }
        let mut opt = Adadelta::new(AdadeltaConfig { lr: self.cfg.lr, ..AdadeltaConfig::default() }, self.params.sizes());
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0xB0C5);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut history = Vec::with_capacity(self.cfg.epochs);
        for epoch in 0..self.cfg.epochs {
            if self.cfg.anneal {
                opt.set_lr(self.cfg.lr * (1.0 - epoch as f64 / self.cfg.epochs as f64));
            }
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in order.chunks(self.cfg.batch_size) {
                let mut sum: Vec<Vec<f64>> = Vec::new();
                for &i in batch {
                    let (frame, b) = &data[i];
                    let shifted;
                    let (frame, b) = if self.cfg.max_shift > 0 {
                        let dy = offset(&mut rng, self.cfg.max_shift, b.y0, b.y1, h);
                        let dx = offset(&mut rng, self.cfg.max_shift, b.x0, b.x1, w);
                        shifted = translate(frame, b, dy, dx);
                        (&shifted.0, &shifted.1)
                    } else {
                        (frame, b)
                    };
                    let mut g = Graph::new();
                    let (ids, out) = self.record(&mut g, frame)?;
                    let loss = g.mse(out, &normalize_box(b, h, w))?;
                    let value = g.value(loss).item();
                    if !value.is_finite() {
                        return Err(Error::NonFinite(format!("detector loss {} at epoch {} on frame {}", value, epoch, i)));
                    }
                    total += value;
                    g.backward(loss)?;
                    let grads = self.params.grads(&mut g, &ids);
                    if sum.is_empty() {
                        sum = grads;
                    } else {
                        sum.iter_mut().zip(&grads).for_each(|(s, g)| s.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                    }
                }
                let n = batch.len() as f64;
                sum.iter_mut().for_each(|s| s.iter_mut().for_each(|v| *v /= n));
                opt.step(&mut self.params.data_mut(), &sum)?;
            }
            history.push(total / data.len() as f64);
            on_epoch(self, total / data.len() as f64);
        }
        Ok(history)
    }
}
