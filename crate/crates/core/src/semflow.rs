//! Semantic-flow refinement of a mask sequence.
//!
//! The state is a dense flow between consecutive frames, a two-region labeling
//! per frame (LV and background) and one affine motion per region and frame
//! pair. The energy
//!
//! ```text
//! E = E_d + λ_m E_m + λ_t E_t + λ_s E_s + λ_c E_c
//! ```
//!
//! combines a Charbonnier brightness-constancy term, the deviation of the flow
//! from its region's affine motion, label consistency along the flow, a
//! 4-neighbour Potts term and disagreement with the input segmentation. It is
//! minimized by block-coordinate descent over flow, motion and regions; every
//! block update is accepted only where it does not raise the energy.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::sequence::{CineSequence, Image, Mask, MaskSequence};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct Lambdas {
    pub lambda_m: f64,
    pub lambda_t: f64,
    pub lambda_c: f64,
    pub lambda_s: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self { lambda_m: 0.5, lambda_t: 1.0, lambda_c: 2.0, lambda_s: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SfConfig {
    pub lambdas: Lambdas,
    pub outer_iters: usize,
    /// Re-linearizations of the data term per flow update.
    pub warps: usize,
    /// Gradient steps per linearization.
    pub steps: usize,
    /// Largest allowed displacement per axis; `None` means a quarter of the
    /// smaller image side.
    pub flow_cap: Option<f64>,
    pub charbonnier_eps: f64,
    pub icm_sweeps: usize,
    pub tikhonov: f64,
}

impl Default for SfConfig {
    fn default() -> Self {
        Self {
            lambdas: Lambdas::default(),
            outer_iters: 5,
            warps: 3,
            steps: 20,
            flow_cap: None,
            charbonnier_eps: 1e-3,
            icm_sweeps: 10,
            tikhonov: 1e-8,
        }
    }
}

impl SfConfig {
    fn cap(&self, h: usize, w: usize) -> f64 {
        self.flow_cap.unwrap_or(h.min(w) as f64 / 4.0)
    }
}

/// Displacements `(u, v)` (columns, rows) from frame `t` to `t + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub u: Vec<Image>,
    pub v: Vec<Image>,
}

impl FlowField {
    pub fn zeros(pairs: usize, h: usize, w: usize) -> Self {
        Self { u: vec![Image::filled(h, w, 0.0); pairs], v: vec![Image::filled(h, w, 0.0); pairs] }
    }

    pub fn pairs(&self) -> usize {
        self.u.len()
    }

    pub fn max_abs(&self) -> f64 {
        self.u.iter().chain(&self.v).flat_map(|f| f.data()).fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Per-frame region index: `1` is the LV region, `0` the background.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionLabeling {
    pub g: Vec<Mask>,
}

impl RegionLabeling {
    pub fn from_masks(masks: &MaskSequence) -> Self {
        Self { g: masks.masks().to_vec() }
    }

    pub fn to_masks(&self) -> Result<MaskSequence> {
        MaskSequence::new(self.g.clone())
    }
}

/// Affine motion per frame pair and region: `[a0..a5]` with
/// `u = a0 + a1 x + a2 y`, `v = a3 + a4 x + a5 y` in pixel coordinates.
/// Index 0 is the background region, index 1 the LV region.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionParams {
    pub theta: Vec<[[f64; 6]; 2]>,
}

impl MotionParams {
    pub fn zeros(pairs: usize) -> Self {
        Self { theta: vec![[[0.0; 6]; 2]; pairs] }
    }

    #[inline]
    fn eval(&self, t: usize, region: u8, y: usize, x: usize) -> (f64, f64) {
        let a = &self.theta[t][usize::from(region)];
        let (xf, yf) = (x as f64, y as f64);
        (a[0] + a[1] * xf + a[2] * yf, a[3] + a[4] * xf + a[5] * yf)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EnergyTerms {
    pub data: f64,
    pub motion: f64,
    pub time: f64,
    pub space: f64,
    pub coupling: f64,
    pub total: f64,
}

fn charbonnier(z: f64, eps: f64) -> f64 {
    libm::sqrt(z * z + eps * eps)
}

/// Bilinear sample at `(row, col)` with coordinates clamped to the image.
#[inline]
fn sample(img: &Image, y: f64, x: f64) -> f64 {
    let (h, w) = img.dims();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (libm::floor(y) as usize, libm::floor(x) as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = img.get(y0, x0) * (1.0 - fx) + img.get(y0, x1) * fx;
    let bottom = img.get(y1, x0) * (1.0 - fx) + img.get(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Nearest pixel to `(row, col)`, clamped to the image.
#[inline]
fn nearest(h: usize, w: usize, y: f64, x: f64) -> usize {
    let r = libm::round(y).clamp(0.0, (h - 1) as f64) as usize;
    let c = libm::round(x).clamp(0.0, (w - 1) as f64) as usize;
    r * w + c
}

/// `image` sampled at `(x + u, y + v)` for every pixel.
pub fn warp(image: &Image, u: &Image, v: &Image) -> Result<Image> {
    if image.dims() != u.dims() || image.dims() != v.dims() {
        bail!(Shape, "image {:?} and flow {:?}/{:?} differ", image.dims(), u.dims(), v.dims());
    }
    let (h, w) = image.dims();
    Ok(Image::from_fn(h, w, |y, x| sample(image, y as f64 + v.get(y, x), x as f64 + u.get(y, x))))
}

fn check_shapes(x: &CineSequence, flow: &FlowField, g: &RegionLabeling, theta: &MotionParams) -> Result<()> {
    let t = x.len();
    if t < 2 {
        bail!(InvalidArgument, "semantic flow needs at least two frames");
    }
    let dims = x.dims();
    let ok = flow.pairs() == t - 1
        && flow.v.len() == t - 1
        && theta.theta.len() == t - 1
        && g.g.len() == t
        && flow.u.iter().chain(&flow.v).all(|f| f.dims() == dims)
        && g.g.iter().all(|m| m.dims() == dims);
    if !ok {
        bail!(Shape, "flow, labeling or motion parameters do not match a {}-frame {:?} sequence", t, dims);
    }
    Ok(())
}

/// Every term of the energy plus the weighted total.
pub fn energy_terms(
    x: &CineSequence,
    flow: &FlowField,
    g: &RegionLabeling,
    theta: &MotionParams,
    y: &MaskSequence,
    cfg: &SfConfig,
) -> Result<EnergyTerms> {
    check_shapes(x, flow, g, theta)?;
    if y.len() != x.len() || y.dims() != x.dims() {
        bail!(Shape, "input segmentation does not match the sequence");
    }
    let (h, w) = x.dims();
    let lam = cfg.lambdas;
    let mut e = EnergyTerms::default();
    for t in 0..x.len() - 1 {
        let (src, dst) = (&x.frames()[t], &x.frames()[t + 1]);
        let (u, v) = (&flow.u[t], &flow.v[t]);
        for r in 0..h {
            for c in 0..w {
                let (du, dv) = (u.get(r, c), v.get(r, c));
                let (fy, fx) = (r as f64 + dv, c as f64 + du);
                e.data += charbonnier(sample(dst, fy, fx) - src.get(r, c), cfg.charbonnier_eps);
                let k = g.g[t].get(r, c);
                let (mu, mv) = theta.eval(t, k, r, c);
                e.motion += (du - mu) * (du - mu) + (dv - mv) * (dv - mv);
                let next = g.g[t + 1].data()[nearest(h, w, fy, fx)];
                // |g_{t+1,k} - g_{t,k}| summed over both regions
                e.time += if next != k { 2.0 } else { 0.0 };
            }
        }
    }
    for (gt, yt) in g.g.iter().zip(y.masks()) {
        for r in 0..h {
            for c in 0..w {
                let k = gt.get(r, c);
                if c + 1 < w && gt.get(r, c + 1) != k {
                    e.space += 1.0;
                }
                if r + 1 < h && gt.get(r + 1, c) != k {
                    e.space += 1.0;
                }
                if k != yt.get(r, c) {
                    e.coupling += 1.0;
                }
            }
        }
    }
    e.total = e.data + lam.lambda_m * e.motion + lam.lambda_t * e.time + lam.lambda_s * e.space + lam.lambda_c * e.coupling;
    Ok(e)
}

/// Flow-dependent energy of one pixel of pair `t`.
#[allow(clippy::too_many_arguments)]
fn pixel_flow_energy(
    src: f64,
    dst: &Image,
    g_next: &Mask,
    k: u8,
    (r, c): (usize, usize),
    (du, dv): (f64, f64),
    (mu, mv): (f64, f64),
    cfg: &SfConfig,
) -> f64 {
    let (h, w) = dst.dims();
    let (fy, fx) = (r as f64 + dv, c as f64 + du);
    let lam = cfg.lambdas;
    let data = charbonnier(sample(dst, fy, fx) - src, cfg.charbonnier_eps);
    let motion = (du - mu) * (du - mu) + (dv - mv) * (dv - mv);
    let time = if g_next.data()[nearest(h, w, fy, fx)] != k { 2.0 } else { 0.0 };
    data + lam.lambda_m * motion + lam.lambda_t * time
}

/// Minimizes the data and motion terms in the flow, pixel by pixel.
///
/// Each warp linearizes the warped next frame around the current flow and
/// takes damped IRLS gradient steps on the linearized Charbonnier residual
/// plus the quadratic pull towards the region's affine motion. The result of a
/// warp is kept only at pixels where the exact (non-linearized) energy did not
/// increase, so the total energy never goes up.
pub fn update_flow(
    x: &CineSequence,
    flow: &FlowField,
    g: &RegionLabeling,
    theta: &MotionParams,
    cfg: &SfConfig,
) -> Result<FlowField> {
    check_shapes(x, flow, g, theta)?;
    let (h, w) = x.dims();
    let cap = cfg.cap(h, w);
    let lam_m = cfg.lambdas.lambda_m;
    let eps = cfg.charbonnier_eps;
    let mut out = flow.clone();
    for t in 0..x.len() - 1 {
        let (src, dst) = (&x.frames()[t], &x.frames()[t + 1]);
        for r in 0..h {
            for c in 0..w {
                let k = g.g[t].get(r, c);
                let target = theta.eval(t, k, r, c);
                let s = src.get(r, c);
                let mut cur = (out.u[t].get(r, c), out.v[t].get(r, c));
                let mut cur_e = pixel_flow_energy(s, dst, &g.g[t + 1], k, (r, c), cur, target, cfg);
                for _ in 0..cfg.warps {
                    let (fy, fx) = (r as f64 + cur.1, c as f64 + cur.0);
                    let r0 = sample(dst, fy, fx) - s;
                    let ix = 0.5 * (sample(dst, fy, fx + 1.0) - sample(dst, fy, fx - 1.0));
                    let iy = 0.5 * (sample(dst, fy + 1.0, fx) - sample(dst, fy - 1.0, fx));
                    let (mut du, mut dv) = cur;
                    for _ in 0..cfg.steps {
                        let res = r0 + ix * (du - cur.0) + iy * (dv - cur.1);
                        let psi = 1.0 / charbonnier(res, eps);
                        let gu = psi * res * ix + 2.0 * lam_m * (du - target.0);
                        let gv = psi * res * iy + 2.0 * lam_m * (dv - target.1);
                        let step = 0.5 / (psi * (ix * ix + iy * iy) + lam_m + eps);
                        du = (du - step * gu).clamp(-cap, cap);
                        dv = (dv - step * gv).clamp(-cap, cap);
                    }
                    let e = pixel_flow_energy(s, dst, &g.g[t + 1], k, (r, c), (du, dv), target, cfg);
                    if e <= cur_e {
                        cur = (du, dv);
                        cur_e = e;
                    }
                }
                out.u[t].set(r, c, cur.0);
                out.v[t].set(r, c, cur.1);
            }
        }
    }
    Ok(out)
}

/// Solves the 3×3 symmetric positive definite system `a x = b`.
fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let mut m = [[0.0; 4]; 3];
    for i in 0..3 {
        m[i][..3].copy_from_slice(&a[i]);
        m[i][3] = b[i];
    }
    for col in 0..3 {
        let piv = (col..3).max_by(|&p, &q| m[p][col].abs().total_cmp(&m[q][col].abs()))?;
        if m[piv][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, piv);
        for row in 0..3 {
            if row != col {
                let f = m[row][col] / m[col][col];
                for k in col..4 {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    Some([m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]])
}

/// Least-squares affine fit of the flow over each region (Tikhonov damped).
/// A region with no pixels keeps its previous parameters; a fit that would
/// raise the motion term (possible only through the damping) is discarded.
pub fn update_theta(flow: &FlowField, g: &RegionLabeling, theta: &MotionParams, tikhonov: f64) -> Result<MotionParams> {
    if flow.pairs() != theta.theta.len() || g.g.len() != flow.pairs() + 1 {
        bail!(Shape, "flow, labeling and motion parameters disagree in frame count");
    }
    let mut out = theta.clone();
    for t in 0..flow.pairs() {
        let (u, v) = (&flow.u[t], &flow.v[t]);
        let (h, w) = u.dims();
        for region in 0..2u8 {
            let mut ata = [[0.0; 3]; 3];
            let mut atu = [0.0; 3];
            let mut atv = [0.0; 3];
            let mut count = 0usize;
            for r in 0..h {
                for c in 0..w {
                    if g.g[t].get(r, c) != region {
                        continue;
                    }
                    count += 1;
                    let basis = [1.0, c as f64, r as f64];
                    for i in 0..3 {
                        for j in 0..3 {
                            ata[i][j] += basis[i] * basis[j];
                        }
                        atu[i] += basis[i] * u.get(r, c);
                        atv[i] += basis[i] * v.get(r, c);
                    }
                }
            }
            if count == 0 {
                continue;
            }
            for (i, row) in ata.iter_mut().enumerate() {
                row[i] += tikhonov;
            }
            let (Some(pu), Some(pv)) = (solve3(ata, atu), solve3(ata, atv)) else { continue };
            let candidate = [pu[0], pu[1], pu[2], pv[0], pv[1], pv[2]];
            let residual = |a: &[f64; 6]| {
                let mut s = 0.0;
                for r in 0..h {
                    for c in 0..w {
                        if g.g[t].get(r, c) == region {
                            let (xf, yf) = (c as f64, r as f64);
                            let eu = u.get(r, c) - (a[0] + a[1] * xf + a[2] * yf);
                            let ev = v.get(r, c) - (a[3] + a[4] * xf + a[5] * yf);
                            s += eu * eu + ev * ev;
                        }
                    }
                }
                s
            };
            let slot = &mut out.theta[t][usize::from(region)];
            if residual(&candidate) <= residual(slot) {
                *slot = candidate;
            }
        }
    }
    Ok(out)
}

/// Iterated conditional modes over the region labels, raster order per frame,
/// until a sweep changes nothing or `cfg.icm_sweeps` sweeps ran. Ties keep the
/// current label.
pub fn update_regions(
    x: &CineSequence,
    flow: &FlowField,
    theta: &MotionParams,
    y: &MaskSequence,
    g: &RegionLabeling,
    cfg: &SfConfig,
) -> Result<RegionLabeling> {
    check_shapes(x, flow, g, theta)?;
    let (h, w) = x.dims();
    let n = h * w;
    let frames = x.len();
    let lam = cfg.lambdas;
    // forward nearest-neighbour targets of each pair, and their inverse
    let targets: Vec<Vec<usize>> = (0..frames - 1)
        .map(|t| {
            (0..n)
                .map(|i| {
                    let (r, c) = (i / w, i % w);
                    nearest(h, w, r as f64 + flow.v[t].get(r, c), c as f64 + flow.u[t].get(r, c))
                })
                .collect()
        })
        .collect();
    let sources: Vec<(Vec<usize>, Vec<usize>)> = targets
        .iter()
        .map(|tg| {
            let mut start = vec![0usize; n + 1];
            for &d in tg {
                start[d + 1] += 1;
            }
            for i in 0..n {
                start[i + 1] += start[i];
            }
            let mut fill = start.clone();
            let mut list = vec![0usize; n];
            for (src, &d) in tg.iter().enumerate() {
                list[fill[d]] = src;
                fill[d] += 1;
            }
            (start, list)
        })
        .collect();

    let mut out = g.clone();
    for _ in 0..cfg.icm_sweeps {
        let mut changed = false;
        for t in 0..frames {
            for i in 0..n {
                let (r, c) = (i / w, i % w);
                let mut cost = [0.0f64; 2];
                for (label, slot) in cost.iter_mut().enumerate() {
                    let label = label as u8;
                    let mut e = 0.0;
                    if t + 1 < frames {
                        let (mu, mv) = theta.eval(t, label, r, c);
                        let du = flow.u[t].get(r, c) - mu;
                        let dv = flow.v[t].get(r, c) - mv;
                        e += lam.lambda_m * (du * du + dv * dv);
                        if out.g[t + 1].data()[targets[t][i]] != label {
                            e += 2.0 * lam.lambda_t;
                        }
                    }
                    if t > 0 {
                        let (start, list) = &sources[t - 1];
                        for &src in &list[start[i]..start[i + 1]] {
                            if out.g[t - 1].data()[src] != label {
                                e += 2.0 * lam.lambda_t;
                            }
                        }
                    }
                    let gt = &out.g[t];
                    let mut nb = 0.0;
                    if r > 0 && gt.get(r - 1, c) != label {
                        nb += 1.0;
                    }
                    if r + 1 < h && gt.get(r + 1, c) != label {
                        nb += 1.0;
                    }
                    if c > 0 && gt.get(r, c - 1) != label {
                        nb += 1.0;
                    }
                    if c + 1 < w && gt.get(r, c + 1) != label {
                        nb += 1.0;
                    }
                    e += lam.lambda_s * nb;
                    if y.masks()[t].get(r, c) != label {
                        e += lam.lambda_c;
                    }
                    *slot = e;
                }
                let current = out.g[t].get(r, c);
                let other = 1 - current;
                if cost[usize::from(other)] < cost[usize::from(current)] {
                    out.g[t].set(r, c, other);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok(out)
}

/// Energies recorded after each block update of one outer iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SfIteration {
    pub after_flow: EnergyTerms,
    pub after_theta: EnergyTerms,
    pub after_regions: EnergyTerms,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SfOutput {
    pub masks: MaskSequence,
    pub flow: FlowField,
    pub theta: MotionParams,
    pub initial: EnergyTerms,
    pub iterations: Vec<SfIteration>,
}

impl SfOutput {
    /// Total energy at the start and after every outer iteration.
    pub fn trace(&self) -> Vec<f64> {
        core::iter::once(self.initial.total).chain(self.iterations.iter().map(|i| i.after_regions.total)).collect()
    }
}

fn finite_or_dump(e: EnergyTerms, stage: &str, iter: usize, flow: &FlowField) -> Result<EnergyTerms> {
    if !e.total.is_finite() {
        bail!(
            NonFinite,
            "semantic flow energy not finite after {} in iteration {}: {:?}; max |flow| = {}",
            stage,
            iter,
            e,
            flow.max_abs()
        );
    }
    Ok(e)
}

/// Block-coordinate descent from `g = y`, zero flow and zero motion.
pub fn refine_sf(x: &CineSequence, y: &MaskSequence, cfg: &SfConfig) -> Result<SfOutput> {
    if !y.matches(x) {
        bail!(Shape, "segmentation {}x{:?} vs sequence {}x{:?}", y.len(), y.dims(), x.len(), x.dims());
    }
    let (h, w) = x.dims();
    if x.len() < 2 {
        return Ok(SfOutput {
            masks: y.clone(),
            flow: FlowField::zeros(0, h, w),
            theta: MotionParams::zeros(0),
            initial: EnergyTerms::default(),
            iterations: Vec::new(),
        });
    }
    let pairs = x.len() - 1;
    let mut g = RegionLabeling::from_masks(y);
    let mut flow = FlowField::zeros(pairs, h, w);
    let mut theta = MotionParams::zeros(pairs);
    let initial = finite_or_dump(energy_terms(x, &flow, &g, &theta, y, cfg)?, "initialization", 0, &flow)?;
    let mut iterations = Vec::with_capacity(cfg.outer_iters);
    for it in 0..cfg.outer_iters {
        flow = update_flow(x, &flow, &g, &theta, cfg)?;
        let after_flow = finite_or_dump(energy_terms(x, &flow, &g, &theta, y, cfg)?, "flow update", it, &flow)?;
        theta = update_theta(&flow, &g, &theta, cfg.tikhonov)?;
        let after_theta = finite_or_dump(energy_terms(x, &flow, &g, &theta, y, cfg)?, "motion update", it, &flow)?;
        g = update_regions(x, &flow, &theta, y, &g, cfg)?;
        let after_regions = finite_or_dump(energy_terms(x, &flow, &g, &theta, y, cfg)?, "region update", it, &flow)?;
        iterations.push(SfIteration { after_flow, after_theta, after_regions });
    }
    Ok(SfOutput { masks: g.to_masks()?, flow, theta, initial, iterations })
}
