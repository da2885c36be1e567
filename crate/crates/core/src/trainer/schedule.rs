use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup from 0 to `base_lr`, then cosine annealing to 0 at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

/// `√batch · 1e-4`.
pub fn base_lr_for_batch(batch: usize) -> f64 {
    (batch as f64).sqrt() * 1e-4
}

impl Schedule {
    pub fn new(base_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if !(base_lr >= 0.0) || !base_lr.is_finite() {
            return Err(Error::Config(format!("base learning rate must be nonnegative, got {base_lr}")));
        }
        if total_steps == 0 || warmup_steps > total_steps {
            return Err(Error::Config(format!(
                "schedule needs 0 < warmup ({warmup_steps}) <= total ({total_steps})"
            )));
        }
        Ok(Schedule {
            base_lr,
            warmup_steps,
            total_steps,
        })
    }

    pub fn from_epochs(base_lr: f64, warmup_epochs: u64, total_epochs: u64, steps_per_epoch: u64) -> Result<Self> {
        Self::new(base_lr, warmup_epochs * steps_per_epoch, total_epochs * steps_per_epoch)
    }

    /// Steps beyond `total_steps` clamp to the end of the schedule.
    pub fn lr_at(&self, step: u64) -> f64 {
        let step = step.min(self.total_steps);
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        if span == 0.0 {
            return 0.0;
        }
        let progress = (step - self.warmup_steps) as f64 / span;
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
