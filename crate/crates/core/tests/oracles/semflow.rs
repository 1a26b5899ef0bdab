//! Semantic-flow fixtures with known answers.

use lvseg_core::metrics::dice;
use lvseg_core::semflow::{energy_terms, refine_sf, update_flow, FlowField, Lambdas, MotionParams, RegionLabeling, SfConfig, SfOutput};
use lvseg_core::sequence::{Image, Mask};
use lvseg_core::synth::{generate, SynthConfig};
use lvseg_core::{CineSequence, MaskSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn seq(frames: Vec<Image>) -> CineSequence {
    CineSequence::new(frames, (1.0, 1.0), "f").unwrap()
}

pub fn disk(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> Mask {
    Mask::from_fn(h, w, |y, x| u8::from((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r))
}

/// First energy increase over outer iterations or coordinate updates, if any.
pub fn descent_violation(out: &SfOutput) -> Option<(f64, f64)> {
    let mut prev = out.initial.total;
    for it in &out.iterations {
        for e in [it.after_flow.total, it.after_theta.total, it.after_regions.total] {
            if e > prev {
                return Some((prev, e));
            }
            prev = e;
        }
    }
    let trace = out.trace();
    trace.windows(2).find(|w| w[1] > w[0]).map(|w| (w[0], w[1]))
}

pub struct StaticResult {
    pub unchanged: bool,
    pub max_flow: f64,
    pub out: SfOutput,
}

/// Three identical frames with a consistent disk under `λ_c = 10`.
pub fn static_sequence() -> StaticResult {
    let img = Image::from_fn(16, 16, |y, x| if (y as f64 - 8.0).powi(2) + (x as f64 - 7.0).powi(2) <= 20.0 { 0.8 } else { 0.2 });
    let x = seq(vec![img.clone(), img.clone(), img]);
    let y = MaskSequence::new(vec![disk(16, 16, 8.0, 7.0, 4.5); 3]).unwrap();
    let cfg = SfConfig { lambdas: Lambdas { lambda_c: 10.0, ..Lambdas::default() }, ..SfConfig::default() };
    let out = refine_sf(&x, &y, &cfg).unwrap();
    StaticResult { unchanged: out.masks == y, max_flow: out.flow.max_abs(), out }
}

fn ramp_square(offset: usize) -> Image {
    Image::from_fn(32, 32, |y, x| {
        let x0 = 10 + offset;
        if (10..22).contains(&y) && (x0..x0 + 12).contains(&x) {
            0.3 + 0.04 * (x - x0) as f64
        } else {
            0.0
        }
    })
}

/// A textured square moved 2 px right. Returns the mean flow over the
/// square and the energy before and after one flow update.
pub fn known_shift() -> ((f64, f64), (f64, f64)) {
    let x = seq(vec![ramp_square(0), ramp_square(2)]);
    let g = RegionLabeling { g: vec![Mask::filled(32, 32, 0); 2] };
    let cfg = SfConfig { lambdas: Lambdas { lambda_m: 0.0, ..Lambdas::default() }, ..SfConfig::default() };
    let y = MaskSequence::new(g.g.clone()).unwrap();
    let theta = MotionParams::zeros(1);
    let flow0 = FlowField::zeros(1, 32, 32);
    let flow = update_flow(&x, &flow0, &g, &theta, &cfg).unwrap();
    let (mut su, mut sv) = (0.0, 0.0);
    for r in 10..22 {
        for c in 10..22 {
            su += flow.u[0].get(r, c);
            sv += flow.v[0].get(r, c);
        }
    }
    let before = energy_terms(&x, &flow0, &g, &theta, &y, &cfg).unwrap().total;
    let after = energy_terms(&x, &flow, &g, &theta, &y, &cfg).unwrap().total;
    ((su / 144.0, sv / 144.0), (before, after))
}

/// Flips 10% of one frame's labels in a drifting synthetic sequence. Returns
/// that frame's Dice before and after refinement.
pub fn corrupted_frame() -> (f64, f64, SfOutput) {
    let cfg = SynthConfig {
        frames: 8,
        height: 32,
        width: 32,
        radius_min: 6.0,
        radius_max: 7.0,
        ring_width: 2.0,
        noise_std: 0.02,
        distractors: 0,
        rv_blob: false,
        drift: (2.0, 0.0),
        ..SynthConfig::default()
    };
    let s = generate(&cfg, 4, "c").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut masks = s.masks.masks().to_vec();
    for v in masks[4].data_mut() {
        if rng.random_bool(0.1) {
            *v = 1 - *v;
        }
    }
    let y = MaskSequence::new(masks).unwrap();
    let out = refine_sf(&s.seq, &y, &SfConfig::default()).unwrap();
    let truth = &s.masks.masks()[4];
    let before = dice(&y.masks()[4], truth).unwrap();
    let after = dice(&out.masks.masks()[4], truth).unwrap();
    (before, after, out)
}

/// Random weights on small textured sequences.
pub fn random_weight_runs(cases: usize) -> Vec<SfOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    (0..cases)
        .map(|case| {
            let t = 3;
            let frames = (0..t)
                .map(|k| {
                    Image::from_fn(12, 12, |y, x| {
                        (0.5 + 0.3 * ((x as f64 + k as f64) * 0.5).sin() * (y as f64 * 0.3).cos() + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0)
                    })
                })
                .collect();
            let x = seq(frames);
            let y = MaskSequence::new((0..t).map(|k| disk(12, 12, 6.0, 5.0 + k as f64, 3.0 + case as f64 * 0.3)).collect()).unwrap();
            let cfg = SfConfig {
                lambdas: Lambdas {
                    lambda_m: rng.random_range(0.0..1.0),
                    lambda_t: rng.random_range(0.0..2.0),
                    lambda_c: rng.random_range(0.0..3.0),
                    lambda_s: rng.random_range(0.0..1.0),
                },
                outer_iters: 3,
                ..SfConfig::default()
            };
            refine_sf(&x, &y, &cfg).unwrap()
        })
        .collect()
}
