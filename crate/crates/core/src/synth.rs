//! Seeded generator of synthetic CINE sequences: a bright blood pool whose
//! elliptical boundary contracts and relaxes once over the sequence, wrapped in
//! a low-contrast myocardial ring, with dark papillary speckles touching the
//! boundary from inside, an optional right-ventricle blob and Gaussian noise.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{bail, Result};
use crate::sequence::{BoundingBox, CineSequence, Image, Mask, MaskSequence};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SynthConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// End-diastolic semi-axes are drawn from this range (pixels).
    pub radius_min: f64,
    pub radius_max: f64,
    /// Fractional radius reduction at end systole.
    pub contraction: f64,
    pub noise_std: f64,
    /// Papillary speckles per sequence.
    pub distractors: usize,
    /// Speckle radius at end diastole and end systole (pixels).
    pub speckle_radius: (f64, f64),
    pub ring_width: f64,
    /// Rigid shift of the ventricle centre at end systole (pixels, x then y).
    pub drift: (f64, f64),
    pub rv_blob: bool,
    pub background: f64,
    pub ring: f64,
    pub pool: f64,
    pub speckle: f64,
    pub rv: f64,
    pub spacing_mm: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 30,
            height: 64,
            width: 64,
            radius_min: 9.0,
            radius_max: 14.0,
            contraction: 0.35,
            noise_std: 0.05,
            distractors: 3,
            speckle_radius: (1.0, 3.0),
            ring_width: 3.0,
            drift: (0.0, 0.0),
            rv_blob: true,
            background: 0.2,
            ring: 0.4,
            pool: 0.85,
            speckle: 0.35,
            rv: 0.6,
            spacing_mm: (1.5, 1.5),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height < 8 || self.width < 8 {
            bail!(InvalidArgument, "need at least one frame of at least 8x8 pixels");
        }
        if !(self.radius_min >= 2.0 && self.radius_max >= self.radius_min) {
            bail!(InvalidArgument, "radius range [{}, {}] invalid", self.radius_min, self.radius_max);
        }
        if !(0.0..1.0).contains(&self.contraction) {
            bail!(InvalidArgument, "contraction {} outside [0, 1)", self.contraction);
        }
        if !(self.noise_std >= 0.0) || !(self.ring_width >= 0.0) {
            bail!(InvalidArgument, "noise and ring width must be non-negative");
        }
        if !(self.spacing_mm.0 > 0.0 && self.spacing_mm.1 > 0.0) {
            bail!(InvalidArgument, "pixel spacing must be positive");
        }
        Ok(())
    }

    /// Contraction phase in `[0, 1]`: 0 at end diastole, 1 at end systole.
    pub fn phase(&self, t: usize) -> f64 {
        (1.0 - libm::cos(2.0 * PI * t as f64 / self.frames as f64)) / 2.0
    }

    /// Radius scale at frame `t`.
    pub fn radius_scale(&self, t: usize) -> f64 {
        1.0 - self.contraction * self.phase(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub seq: CineSequence,
    pub masks: MaskSequence,
    pub boxes: Vec<BoundingBox>,
}

struct Speckle {
    angle: f64,
    scale: f64,
}

/// Generates one subject. Identical `(cfg, seed)` give bit-identical output.
pub fn generate(cfg: &SynthConfig, seed: u64, subject_id: &str) -> Result<SynthSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let rx = rng.random_range(cfg.radius_min..=cfg.radius_max);
    let ry = rng.random_range(cfg.radius_min..=cfg.radius_max);
    let tilt = rng.random_range(0.0..PI);
    let reach = rx.max(ry) + cfg.ring_width + 1.0;
    let (dx, dy) = cfg.drift;
    let x_lo = reach + (-dx).max(0.0);
    let x_hi = w - 1.0 - reach - dx.max(0.0);
    let y_lo = reach + (-dy).max(0.0);
    let y_hi = h - 1.0 - reach - dy.max(0.0);
    if x_lo > x_hi || y_lo > y_hi {
        bail!(
            InvalidArgument,
            "ellipse with radii up to {:.1} plus ring {:.1} does not fit a {}x{} image",
            rx.max(ry),
            cfg.ring_width,
            cfg.height,
            cfg.width
        );
    }
    let cx0 = if x_lo == x_hi { x_lo } else { rng.random_range(x_lo..=x_hi) };
    let cy0 = if y_lo == y_hi { y_lo } else { rng.random_range(y_lo..=y_hi) };
    let speckles: Vec<Speckle> = (0..cfg.distractors)
        .map(|_| Speckle { angle: rng.random_range(0.0..2.0 * PI), scale: rng.random_range(0.7..1.3) })
        .collect();
    let rv_side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| crate::Error::InvalidArgument(format!("noise: {}", e)))?;
    let (ct, st) = (libm::cos(tilt), libm::sin(tilt));

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut masks = Vec::with_capacity(cfg.frames);
    let mut boxes = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let phase = cfg.phase(t);
        let scale = cfg.radius_scale(t);
        let (ax, ay) = (rx * scale, ry * scale);
        let (cx, cy) = (cx0 + dx * phase, cy0 + dy * phase);
        let (ox, oy) = (ax + cfg.ring_width, ay + cfg.ring_width);
        let spk_r = cfg.speckle_radius.0 + (cfg.speckle_radius.1 - cfg.speckle_radius.0) * phase;
        // speckle centres sit inside the boundary at one speckle radius
        let spk: Vec<(f64, f64, f64)> = speckles
            .iter()
            .map(|s| {
                let r = spk_r * s.scale;
                let (ca, sa) = (libm::cos(s.angle), libm::sin(s.angle));
                let (px, py) = ((ax - r) * ca, (ay - r) * sa);
                (cx + px * ct - py * st, cy + px * st + py * ct, r)
            })
            .collect();
        let rv_c = (cx + rv_side * (ox + 0.9 * ax) * ct, cy + rv_side * (ox + 0.9 * ax) * st);
        let rv_r = (0.8 * ax, 0.5 * ay);

        let mut img = Image::filled(cfg.height, cfg.width, cfg.background);
        let mut mask = Mask::filled(cfg.height, cfg.width, 0);
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let (px, py) = (x as f64 - cx, y as f64 - cy);
                let (u, v) = (px * ct + py * st, -px * st + py * ct);
                let inner = (u / ax) * (u / ax) + (v / ay) * (v / ay);
                let outer = (u / ox) * (u / ox) + (v / oy) * (v / oy);
                let value = if inner <= 1.0 {
                    mask.set(y, x, 1);
                    let dark = spk.iter().any(|&(sx, sy, r)| {
                        let (ex, ey) = (x as f64 - sx, y as f64 - sy);
                        ex * ex + ey * ey <= r * r
                    });
                    if dark {
                        cfg.speckle
                    } else {
                        cfg.pool
                    }
                } else if outer <= 1.0 {
                    cfg.ring
                } else if cfg.rv_blob && {
                    let (ex, ey) = (x as f64 - rv_c.0, y as f64 - rv_c.1);
                    let (eu, ev) = (ex * ct + ey * st, -ex * st + ey * ct);
                    (eu / rv_r.1) * (eu / rv_r.1) + (ev / rv_r.0) * (ev / rv_r.0) <= 1.0
                } {
                    cfg.rv
                } else {
                    cfg.background
                };
                img.set(y, x, value);
            }
        }
        if cfg.noise_std > 0.0 {
            for p in img.data_mut() {
                *p = (*p + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        let Some(bbox) = BoundingBox::of_mask(&mask) else {
            bail!(Invariant, "frame {} has an empty ventricle", t);
        };
        frames.push(img);
        masks.push(mask);
        boxes.push(bbox);
    }
    Ok(SynthSample {
        seq: CineSequence::new(frames, cfg.spacing_mm, subject_id)?,
        masks: MaskSequence::new(masks)?,
        boxes,
    })
}

/// One generated subject with its twin-pair identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSubject {
    pub id: String,
    pub twin_pair: String,
    pub sample: SynthSample,
}

/// Generates `subjects` subjects; consecutive subjects form twin pairs.
pub fn generate_dataset(cfg: &SynthConfig, subjects: usize, seed: u64) -> Result<Vec<SynthSubject>> {
    (0..subjects)
        .map(|i| {
            let id = format!("subject-{:03}", i);
            let sub_seed = seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            Ok(SynthSubject { twin_pair: format!("pair-{:03}", i / 2), sample: generate(cfg, sub_seed, &id)?, id })
        })
        .collect()
}
