//! Fully connected CRF with Gaussian edge potentials.
//!
//! Each frame is refined on its own. The binary labeling is relaxed to a
//! foreground probability `q = sigmoid(z)` per pixel and the expected energy
//!
//! ```text
//! E = Σ_i q_i θ_i(fg) + (1 - q_i) θ_i(bg)
//!   + Σ_{i<j} k(f_i, f_j) · (q_i (1 - q_j) + (1 - q_i) q_j)
//! ```
//!
//! is minimized over the logits `z` with L-BFGS. The pairwise factor is the
//! probability that two independent labels disagree, i.e. the expected Potts
//! penalty. Pairs farther apart than four spatial bandwidths are dropped.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::lbfgs::{self, LbfgsOptions};
use crate::sequence::{CineSequence, Image, Mask, MaskSequence, ProbSequence};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct CrfParams {
    /// Weight of the position + intensity kernel.
    pub w_app: f64,
    /// Weight of the position-only kernel.
    pub w_smooth: f64,
    pub sigma_p_app: f64,
    pub sigma_i: f64,
    pub sigma_p_smooth: f64,
    pub prob_floor: f64,
    pub lbfgs: LbfgsOptions,
    /// Extra L-BFGS runs started from the clipped logits of the previous run.
    pub restarts: usize,
    pub restart_clip: f64,
    /// Also start from all-foreground and all-background logits and keep the
    /// rounded labeling of lowest energy.
    pub uniform_starts: bool,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            w_app: 10.0,
            w_smooth: 3.0,
            sigma_p_app: 20.0,
            sigma_i: 0.1,
            sigma_p_smooth: 3.0,
            prob_floor: 1e-6,
            lbfgs: LbfgsOptions { history: 10, max_iters: 200, grad_tol: 1e-6, max_step: 1.0, ..LbfgsOptions::default() },
            restarts: 4,
            restart_clip: 2.0,
            uniform_starts: true,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [self.w_app, self.w_smooth];
        let pos = [self.sigma_p_app, self.sigma_i, self.sigma_p_smooth, self.prob_floor];
        if nonneg.iter().any(|v| !(*v >= 0.0)) || pos.iter().any(|v| !(*v > 0.0)) || self.prob_floor >= 0.5 {
            bail!(InvalidArgument, "CRF weights must be >= 0, bandwidths and floor > 0 (floor < 0.5)");
        }
        Ok(())
    }

    /// Spatial distance beyond which the kernel is treated as zero.
    pub fn cutoff(&self) -> f64 {
        4.0 * self.sigma_p_app.max(self.sigma_p_smooth)
    }
}

/// Pixel position `(row, col)` and intensity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector {
    pub p: (f64, f64),
    pub i: f64,
}

/// Unary potentials of one frame, per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Unary {
    pub fg: Vec<f64>,
    pub bg: Vec<f64>,
}

/// `θ(fg) = -ln max(P, floor)`, `θ(bg) = -ln max(1 - P, floor)`.
pub fn unary_of(probs: &[f64], floor: f64) -> Unary {
    let fg = probs.iter().map(|&p| -libm::log(p.max(floor))).collect();
    let bg = probs.iter().map(|&p| -libm::log((1.0 - p).max(floor))).collect();
    Unary { fg, bg }
}

pub fn unary(probs: &ProbSequence, floor: f64) -> Vec<Unary> {
    probs.probs().iter().map(|p| unary_of(p.data(), floor)).collect()
}

pub fn pairwise_kernel(a: &FeatureVector, b: &FeatureVector, params: &CrfParams) -> f64 {
    let dy = a.p.0 - b.p.0;
    let dx = a.p.1 - b.p.1;
    let d2 = dy * dy + dx * dx;
    let di = a.i - b.i;
    let app = libm::exp(-d2 / (2.0 * params.sigma_p_app * params.sigma_p_app) - di * di / (2.0 * params.sigma_i * params.sigma_i));
    let smooth = libm::exp(-d2 / (2.0 * params.sigma_p_smooth * params.sigma_p_smooth));
    params.w_app * app + params.w_smooth * smooth
}

/// Pixel features of a frame in raster order.
pub fn image_features(img: &Image) -> Vec<FeatureVector> {
    let (h, w) = img.dims();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(FeatureVector { p: (y as f64, x as f64), i: img.get(y, x) });
        }
    }
    out
}

/// Pairs `i < j` within the cutoff, stored row by row.
struct PairTable {
    start: Vec<usize>,
    other: Vec<u32>,
    weight: Vec<f64>,
}

impl PairTable {
    fn build(features: &[FeatureVector], params: &CrfParams) -> Self {
        let n = features.len();
        let cut2 = params.cutoff() * params.cutoff();
        let mut start = Vec::with_capacity(n + 1);
        let mut other = Vec::new();
        let mut weight = Vec::new();
        let active = params.w_app > 0.0 || params.w_smooth > 0.0;
        for i in 0..n {
            start.push(other.len());
            if !active {
                continue;
            }
            for j in i + 1..n {
                let dy = features[i].p.0 - features[j].p.0;
                let dx = features[i].p.1 - features[j].p.1;
                if dy * dy + dx * dx > cut2 {
                    continue;
                }
                let k = pairwise_kernel(&features[i], &features[j], params);
                if k > 0.0 {
                    other.push(j as u32);
                    weight.push(k);
                }
            }
        }
        start.push(other.len());
        Self { start, other, weight }
    }

    fn pairs(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.start[i]..self.start[i + 1];
        self.other[r.clone()].iter().map(|&j| j as usize).zip(self.weight[r].iter().copied())
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// Expected energy for soft labels `q`; writes `dE/dq` into `grad` when given.
fn energy_q(q: &[f64], un: &Unary, pairs: &PairTable, mut grad: Option<&mut [f64]>) -> f64 {
    let n = q.len();
    let mut e = 0.0;
    for i in 0..n {
        e += q[i] * un.fg[i] + (1.0 - q[i]) * un.bg[i];
    }
    if let Some(g) = grad.as_deref_mut() {
        for i in 0..n {
            g[i] = un.fg[i] - un.bg[i];
        }
    }
    for i in 0..n {
        let qi = q[i];
        let mut gi = 0.0;
        for (j, k) in pairs.pairs(i) {
            let qj = q[j];
            e += k * (qi + qj - 2.0 * qi * qj);
            if let Some(g) = grad.as_deref_mut() {
                gi += k * (1.0 - 2.0 * qj);
                g[j] += k * (1.0 - 2.0 * qi);
            }
        }
        if let Some(g) = grad.as_deref_mut() {
            g[i] += gi;
        }
    }
    e
}

/// Energy of soft labels over an arbitrary feature set.
pub fn energy_of(q: &[f64], un: &Unary, features: &[FeatureVector], params: &CrfParams) -> f64 {
    energy_q(q, un, &PairTable::build(features, params), None)
}

/// Total energy of a soft labeling of a whole sequence (sum of per-frame energies).
pub fn energy(q: &ProbSequence, unaries: &[Unary], seq: &CineSequence, params: &CrfParams) -> Result<f64> {
    if q.len() != seq.len() || q.dims() != seq.dims() || unaries.len() != seq.len() {
        bail!(Shape, "labeling, unaries and sequence disagree in shape");
    }
    Ok(q.probs()
        .iter()
        .zip(unaries)
        .zip(seq.frames())
        .map(|((qt, un), img)| energy_of(qt.data(), un, &image_features(img), params))
        .sum())
}

/// Relaxed energy as a function of the logits `z` (`q = sigmoid(z)`), with
/// its gradient written into `grad`.
pub fn logit_objective(z: &[f64], un: &Unary, features: &[FeatureVector], params: &CrfParams, grad: &mut [f64]) -> f64 {
    let pairs = PairTable::build(features, params);
    let q: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
    let e = energy_q(&q, un, &pairs, Some(grad));
    for (g, qi) in grad.iter_mut().zip(&q) {
        *g *= qi * (1.0 - qi);
    }
    e
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRefinement {
    pub labels: Vec<u8>,
    pub q: Vec<f64>,
    /// One energy trace per L-BFGS run: the start value and every accepted step.
    pub runs: Vec<Vec<f64>>,
    pub line_search_failed: bool,
}

/// Minimizes the relaxed energy over one set of features.
pub fn refine_features(probs: &[f64], features: &[FeatureVector], params: &CrfParams) -> Result<FrameRefinement> {
    params.validate()?;
    if probs.len() != features.len() {
        bail!(Shape, "{} probabilities for {} features", probs.len(), features.len());
    }
    let un = unary_of(probs, params.prob_floor);
    let pairs = PairTable::build(features, params);
    let unary_start: Vec<f64> = un.bg.iter().zip(&un.fg).map(|(b, f)| b - f).collect();
    let n = unary_start.len();
    let mut starts = vec![unary_start];
    if params.uniform_starts && !pairs.other.is_empty() {
        starts.push(vec![params.restart_clip; n]);
        starts.push(vec![-params.restart_clip; n]);
    }
    let mut q = vec![0.0; n];
    let mut dq = vec![0.0; n];
    let mut best: Option<(f64, FrameRefinement)> = None;
    let mut runs = Vec::new();
    let mut failed = false;
    for mut z in starts {
        let mut previous: Option<Vec<u8>> = None;
        for _ in 0..=params.restarts {
            let res = lbfgs::minimize(
                |z, gz| {
                    for (qi, &zi) in q.iter_mut().zip(z) {
                        *qi = sigmoid(zi);
                    }
                    let e = energy_q(&q, &un, &pairs, Some(&mut dq));
                    for ((g, d), qi) in gz.iter_mut().zip(&dq).zip(&q) {
                        *g = d * qi * (1.0 - qi);
                    }
                    e
                },
                &z,
                &params.lbfgs,
            )?;
            failed |= res.line_search_failed;
            runs.push(res.trace);
            let labels: Vec<u8> = res.x.iter().map(|&z| u8::from(z >= 0.0)).collect();
            let hard: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
            let e_hard = energy_q(&hard, &un, &pairs, None);
            if best.as_ref().is_none_or(|(e, _)| e_hard < *e) {
                let q = res.x.iter().map(|&z| sigmoid(z)).collect();
                best = Some((e_hard, FrameRefinement { labels: labels.clone(), q, runs: Vec::new(), line_search_failed: false }));
            }
            if previous.as_ref() == Some(&labels) {
                break;
            }
            previous = Some(labels);
            // pull saturated logits back so their gradients are visible again
            z = res.x.iter().map(|v| v.clamp(-params.restart_clip, params.restart_clip)).collect();
        }
    }
    let (_, mut out) = best.expect("at least one run");
    out.runs = runs;
    out.line_search_failed = failed;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfOutput {
    pub masks: MaskSequence,
    pub q: ProbSequence,
    pub frames: Vec<FrameRefinement>,
}

impl CrfOutput {
    pub fn any_line_search_failed(&self) -> bool {
        self.frames.iter().any(|f| f.line_search_failed)
    }
}

/// Refines every frame of `probs` against the intensities of `seq`.
pub fn refine(probs: &ProbSequence, seq: &CineSequence, params: &CrfParams) -> Result<CrfOutput> {
    if probs.len() != seq.len() || probs.dims() != seq.dims() {
        bail!(Shape, "probabilities {}x{:?} vs sequence {}x{:?}", probs.len(), probs.dims(), seq.len(), seq.dims());
    }
    let (h, w) = seq.dims();
    let mut frames = Vec::with_capacity(seq.len());
    for (p, img) in probs.probs().iter().zip(seq.frames()) {
        frames.push(refine_features(p.data(), &image_features(img), params)?);
    }
    let masks = frames.iter().map(|f| Mask::new(h, w, f.labels.clone())).collect::<Result<Vec<_>>>()?;
    let q = frames.iter().map(|f| Image::new(h, w, f.q.clone())).collect::<Result<Vec<_>>>()?;
    Ok(CrfOutput { masks: MaskSequence::new(masks)?, q: ProbSequence::new(q)?, frames })
}
