//! Learning-rate schedules, indexed by optimizer step or epoch.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub trait LrSchedule {
    fn lr(&self, step: usize) -> f64;
}

/// Cosine one-cycle policy: ramp from `max_lr / div_factor` to `max_lr` over
/// the first `pct_start` of the steps, then anneal to
/// `max_lr / (div_factor * final_div_factor)`.
///
/// The warm-up end is rounded to a whole step so the peak is always emitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: usize,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl OneCycle {
    pub fn new(max_lr: f64, total_steps: usize) -> Self {
        Self {
            max_lr,
            total_steps,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("peak lr must be positive, got {}", self.max_lr)));
        }
        if !(self.pct_start > 0.0 && self.pct_start < 1.0) {
            return Err(Error::InvalidArgument(format!("pct_start must be in (0, 1), got {}", self.pct_start)));
        }
        if !(self.div_factor >= 1.0 && self.final_div_factor >= 1.0) {
            return Err(Error::InvalidArgument("division factors must be >= 1".into()));
        }
        Ok(())
    }

    fn initial(&self) -> f64 {
        self.max_lr / self.div_factor
    }

    fn min(&self) -> f64 {
        self.initial() / self.final_div_factor
    }

    fn peak_step(&self) -> usize {
        let raw = (self.pct_start * self.total_steps as f64).round() as usize;
        raw.saturating_sub(1).clamp(1.min(self.last_step()), self.last_step())
    }

    fn last_step(&self) -> usize {
        self.total_steps.saturating_sub(1)
    }
}

fn cos_anneal(start: f64, end: f64, pct: f64) -> f64 {
    end + (start - end) / 2.0 * (1.0 + (std::f64::consts::PI * pct).cos())
}

impl LrSchedule for OneCycle {
    fn lr(&self, step: usize) -> f64 {
        let peak = self.peak_step();
        let last = self.last_step();
        let step = step.min(last);
        if step <= peak {
            if peak == 0 {
                return self.max_lr;
            }
            cos_anneal(self.initial(), self.max_lr, step as f64 / peak as f64)
        } else {
            cos_anneal(self.max_lr, self.min(), (step - peak) as f64 / (last - peak) as f64)
        }
    }
}

/// Step decay by `gamma` at each milestone (epoch index where the drop
/// first applies).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiStep {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl MultiStep {
    /// Drops by 10x at 65% and 85% of the run.
    pub fn default_for(base_lr: f64, epochs: usize) -> Self {
        let mut milestones: Vec<usize> = [0.65, 0.85]
            .iter()
            .map(|f| (f * epochs as f64).round() as usize)
            .filter(|&m| m > 0 && m < epochs)
            .collect();
        milestones.dedup();
        Self {
            base_lr,
            milestones,
            gamma: 0.1,
        }
    }

    pub fn validate(&self, epochs: usize) -> Result<()> {
        if !(self.base_lr > 0.0) || !(self.gamma > 0.0) {
            return Err(Error::InvalidArgument("lr and gamma must be positive".into()));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "milestones {:?} must be strictly increasing",
                self.milestones
            )));
        }
        if self.milestones.last().is_some_and(|&m| m >= epochs) {
            return Err(Error::InvalidArgument(format!(
                "milestones {:?} must be below the epoch count {epochs}",
                self.milestones
            )));
        }
        Ok(())
    }
}

impl LrSchedule for MultiStep {
    fn lr(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base_lr * self.gamma.powi(drops as i32)
    }
}

/// Linear ramp from 0 to `base_lr` over `warmup` steps, constant afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupConstant {
    pub base_lr: f64,
    pub warmup: usize,
}

impl LrSchedule for WarmupConstant {
    fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            self.base_lr * step as f64 / self.warmup as f64
        } else {
            self.base_lr
        }
    }
}

/// Linear batch-size scaling: `base_lr * batch / 256`.
pub fn scale_lr(base_lr: f64, batch_size: usize) -> f64 {
    base_lr * batch_size as f64 / 256.0
}
