//! Exhaustive enumeration of hard CRF labelings.

use lvseg_core::crf::{pairwise_kernel, CrfParams, FeatureVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Energy of a hard labeling, evaluated pair by pair.
pub fn hard_energy(labels: &[u8], probs: &[f64], f: &[FeatureVector], p: &CrfParams) -> f64 {
    let mut e = 0.0;
    for i in 0..labels.len() {
        let pi = if labels[i] == 1 { probs[i] } else { 1.0 - probs[i] };
        e -= pi.max(p.prob_floor).ln();
        for j in i + 1..labels.len() {
            if labels[i] != labels[j] {
                e += pairwise_kernel(&f[i], &f[j], p);
            }
        }
    }
    e
}

pub fn brute_force_min(probs: &[f64], f: &[FeatureVector], p: &CrfParams) -> f64 {
    let n = probs.len();
    (0..1u32 << n)
        .map(|bits| {
            let labels: Vec<u8> = (0..n).map(|i| ((bits >> i) & 1) as u8).collect();
            hard_energy(&labels, probs, f, p)
        })
        .fold(f64::INFINITY, f64::min)
}

/// A random 3x3 single-frame instance.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<FeatureVector>, CrfParams) {
    let probs: Vec<f64> = (0..9).map(|_| rng.random_range(0.02..0.98)).collect();
    let f: Vec<FeatureVector> = (0..9)
        .map(|i| FeatureVector { p: ((i / 3) as f64, (i % 3) as f64), i: rng.random_range(0.0..1.0) })
        .collect();
    let p = CrfParams {
        w_app: rng.random_range(0.0..2.0),
        w_smooth: rng.random_range(0.0..2.0),
        sigma_p_app: rng.random_range(0.5..3.0),
        sigma_i: rng.random_range(0.05..0.5),
        sigma_p_smooth: rng.random_range(0.5..2.0),
        ..CrfParams::default()
    };
    (probs, f, p)
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
