//! Limited-memory BFGS with a two-loop recursion and backtracking (Armijo)
//! line search.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LbfgsOptions {
    /// Number of stored `(s, y)` pairs.
    pub history: usize,
    pub max_iters: usize,
    /// Stop once `‖∇f‖∞` falls below this.
    pub grad_tol: f64,
    /// Sufficient-decrease constant.
    pub armijo_c1: f64,
    pub max_halvings: usize,
    /// Upper bound on `‖step · d‖∞` for the first trial of each line search.
    pub max_step: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self { history: 10, max_iters: 200, grad_tol: 1e-9, armijo_c1: 1e-4, max_halvings: 40, max_step: f64::INFINITY }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    /// Objective at the start and after every accepted step.
    pub trace: Vec<f64>,
    pub converged: bool,
    /// Set when the line search gave up; `x` is then the last accepted iterate.
    pub line_search_failed: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

fn two_loop(g: &[f64], history: &VecDeque<Pair>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = vec![0.0; history.len()];
    for (i, p) in history.iter().enumerate().rev() {
        let a = p.rho * dot(&p.s, &q);
        alphas[i] = a;
        q.iter_mut().zip(&p.y).for_each(|(qi, yi)| *qi -= a * yi);
    }
    if let Some(last) = history.back() {
        let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for (i, p) in history.iter().enumerate() {
        let b = p.rho * dot(&p.y, &q);
        q.iter_mut().zip(&p.s).for_each(|(qi, si)| *qi += (alphas[i] - b) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Minimizes `f`, which writes its gradient into the second argument and
/// returns the objective value.
pub fn minimize<F>(mut f: F, x0: &[f64], opts: &LbfgsOptions) -> Result<LbfgsResult>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        bail!(NonFinite, "objective or gradient not finite at the starting point (f = {})", fx);
    }
    let mut history: VecDeque<Pair> = VecDeque::with_capacity(opts.history);
    let mut trace = vec![fx];
    let mut converged = false;
    let mut line_search_failed = false;
    let mut iterations = 0;
    let mut xn = vec![0.0; n];
    let mut gn = vec![0.0; n];

    while iterations < opts.max_iters {
        if inf_norm(&g) < opts.grad_tol {
            converged = true;
            break;
        }
        let mut d = two_loop(&g, &history);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            history.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let mut step = if history.is_empty() { (1.0 / libm::sqrt(-slope)).min(1.0) } else { 1.0 };
        let longest = inf_norm(&d) * step;
        if longest > opts.max_step {
            step *= opts.max_step / longest;
        }

        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            for i in 0..n {
                xn[i] = x[i] + step * d[i];
            }
            let f_new = f(&xn, &mut gn);
            if f_new.is_finite() && f_new <= fx + opts.armijo_c1 * step * slope {
                accepted = Some(f_new);
                break;
            }
            step *= 0.5;
        }
        let Some(f_new) = accepted else {
            line_search_failed = true;
            break;
        };
        if gn.iter().any(|v| !v.is_finite()) {
            bail!(NonFinite, "gradient not finite after step {} (f = {})", iterations, f_new);
        }
        iterations += 1;

        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * libm::sqrt(dot(&s, &s) * dot(&y, &y)) && sy > 0.0 {
            if history.len() == opts.history {
                history.pop_front();
            }
            history.push_back(Pair { s, y, rho: 1.0 / sy });
        }
        core::mem::swap(&mut x, &mut xn);
        core::mem::swap(&mut g, &mut gn);
        fx = f_new;
        trace.push(fx);
    }
    if !converged && inf_norm(&g) < opts.grad_tol {
        converged = true;
    }
    Ok(LbfgsResult { x, f: fx, iterations, trace, converged, line_search_failed })
}
