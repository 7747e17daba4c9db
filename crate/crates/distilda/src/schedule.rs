//! Exponential growth schedule for the balance weight between domain
//! adaptation and distillation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// When the balance weight advances during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BetaUpdate {
    #[default]
    PerEpoch,
    PerBatch,
}

/// Exponential interpolation from `start` to `end` over `epochs` epochs:
/// `beta(t) = start * exp(g * t)` with `g = ln(end / start) / epochs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub start: f64,
    pub end: f64,
    pub epochs: usize,
    growth: f64,
}

/// Growth rate `g = ln(end / start) / epochs`.
pub fn growth_rate(start: f64, end: f64, epochs: usize) -> Result<f64> {
    if start <= 0.0 {
        return Err(Error::InvalidArg {
            op: "growth_rate",
            msg: format!("start must be positive, got {start}"),
        });
    }
    if end < start || end > 1.0 {
        return Err(Error::InvalidArg {
            op: "growth_rate",
            msg: format!("need start <= end <= 1, got start={start} end={end}"),
        });
    }
    if epochs < 1 {
        return Err(Error::InvalidArg {
            op: "growth_rate",
            msg: "epochs must be at least 1".into(),
        });
    }
    Ok((end / start).ln() / epochs as f64)
}

impl BetaSchedule {
    pub fn new(start: f64, end: f64, epochs: usize) -> Result<Self> {
        let growth = growth_rate(start, end, epochs)?;
        Ok(BetaSchedule {
            start,
            end,
            epochs,
            growth,
        })
    }

    pub fn growth(&self) -> f64 {
        self.growth
    }

    /// Balance weight at epoch `t`, clamped to `[start, end]`. `t` may be
    /// fractional in per-batch mode.
    pub fn beta_at(&self, t: f64) -> Result<f64> {
        if !(0.0..=self.epochs as f64).contains(&t) {
            return Err(Error::InvalidArg {
                op: "beta_at",
                msg: format!("epoch index {t} outside [0, {}]", self.epochs),
            });
        }
        if t == 0.0 {
            return Ok(self.start);
        }
        Ok((self.start * (self.growth * t).exp()).clamp(self.start, self.end))
    }
}
