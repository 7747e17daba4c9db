//! SGD with momentum and weight decay, one velocity buffer per parameter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.05,
            weight_decay: 0.0005,
            momentum: 0.9,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One SGD update: `v <- momentum * v + (grad + weight_decay * w)`,
/// `w <- w - lr * v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], cfg: &SgdConfig, velocity: &mut [f64]) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), velocity.len());
    for ((w, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = cfg.momentum * *v + (g + cfg.weight_decay * *w);
        *w -= cfg.learning_rate * *v;
    }
}

/// Momentum state for a fixed list of parameters, addressed by index.
#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig, param_sizes: &[usize]) -> Self {
        Sgd {
            cfg,
            velocity: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Update parameter `index` in place. Parameters that received no
    /// gradient this step are simply skipped by the caller.
    pub fn step(&mut self, index: usize, param: &mut Tensor, grad: &[f64]) {
        sgd_step(&mut param.data, grad, &self.cfg, &mut self.velocity[index]);
    }
}
