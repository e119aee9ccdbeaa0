//! Linear-warmup + cosine-decay learning-rate schedule.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LrSchedule {
    pub warmup_lr: f64,
    pub init_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(
        warmup_lr: f64,
        init_lr: f64,
        min_lr: f64,
        warmup_steps: usize,
        total_steps: usize,
    ) -> Result<Self> {
        if !(warmup_lr <= min_lr && min_lr <= init_lr) {
            return Err(Error::Config(format!(
                "schedule requires warmup_lr <= min_lr <= init_lr, got {warmup_lr} / {min_lr} / {init_lr}"
            )));
        }
        if warmup_steps >= total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {warmup_steps} must be < total_steps {total_steps}"
            )));
        }
        Ok(LrSchedule {
            warmup_lr,
            init_lr,
            min_lr,
            warmup_steps,
            total_steps,
        })
    }

    /// Rate at `step`: linear from warmup_lr to init_lr over the warmup,
    /// then cosine from init_lr to min_lr over the remaining steps.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Contract(format!(
                "lr_at: step {step} outside [0, {}]",
                self.total_steps
            )));
        }
        if step < self.warmup_steps {
            let p = step as f64 / self.warmup_steps as f64;
            return Ok(self.warmup_lr + (self.init_lr - self.warmup_lr) * p);
        }
        // cosine progress measured over post-warmup steps only
        let span = (self.total_steps - self.warmup_steps) as f64;
        let p = (step - self.warmup_steps) as f64 / span;
        Ok(self.min_lr
            + 0.5 * (self.init_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * p).cos()))
    }
}
