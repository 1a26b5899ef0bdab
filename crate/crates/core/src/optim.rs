//! Adadelta over a list of parameter buffers.

use alloc::vec::Vec;

use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AdadeltaConfig {
    pub rho: f64,
    pub eps: f64,
    /// Final multiplier on the Adadelta step.
    pub lr: f64,
}

impl Default for AdadeltaConfig {
    fn default() -> Self {
        Self { rho: 0.95, eps: 1e-6, lr: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adadelta {
    cfg: AdadeltaConfig,
    sq_grad: Vec<Vec<f64>>,
    sq_step: Vec<Vec<f64>>,
}

impl Adadelta {
    pub fn new(cfg: AdadeltaConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let sq_grad: Vec<Vec<f64>> = sizes.into_iter().map(|n| alloc::vec![0.0; n]).collect();
        let sq_step = sq_grad.clone();
        Self { cfg, sq_grad, sq_step }
    }

    pub fn config(&self) -> &AdadeltaConfig {
        &self.cfg
    }

    /// Changes the step multiplier; accumulated statistics are kept.
    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Applies one update. A zero gradient leaves its parameter untouched.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.sq_grad.len() || grads.len() != params.len() {
            bail!(Shape, "optimizer holds {} buffers, got {} params and {} grads", self.sq_grad.len(), params.len(), grads.len());
        }
        let AdadeltaConfig { rho, eps, lr } = self.cfg;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.sq_grad[i].len() {
                bail!(Shape, "buffer {}: {} params, {} grads", i, p.len(), g.len());
            }
            let (eg, ex) = (&mut self.sq_grad[i], &mut self.sq_step[i]);
            for j in 0..p.len() {
                let gj = g[j];
                eg[j] = rho * eg[j] + (1.0 - rho) * gj * gj;
                let dx = -libm::sqrt(ex[j] + eps) / libm::sqrt(eg[j] + eps) * gj;
                ex[j] = rho * ex[j] + (1.0 - rho) * dx * dx;
                p[j] += lr * dx;
            }
        }
        Ok(())
    }
}
