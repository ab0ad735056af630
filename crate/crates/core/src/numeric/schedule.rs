use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup from 0 to `base_lr`, then linear decay back to 0 at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub total_steps: u64,
    pub warmup_fraction: f64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, total_steps: u64) -> Result<Self> {
        Self::with_warmup(base_lr, total_steps, 0.1)
    }

    pub fn with_warmup(base_lr: f64, total_steps: u64, warmup_fraction: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::InvalidArgument("total_steps must be positive".into()));
        }
        if !(warmup_fraction > 0.0 && warmup_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "warmup fraction {warmup_fraction} outside (0, 1)"
            )));
        }
        if !(base_lr >= 0.0) {
            return Err(Error::InvalidArgument(format!("base lr {base_lr} must be >= 0")));
        }
        Ok(LrSchedule {
            base_lr,
            total_steps,
            warmup_fraction,
        })
    }

    /// First step of the decay phase, `⌈warmup_fraction · total_steps⌉`.
    pub fn warmup_steps(&self) -> u64 {
        let x = self.warmup_fraction * self.total_steps as f64;
        // 0.1 * 30 = 3.0000000000000004 must not round up to 4
        let w = if (x - x.round()).abs() < 1e-9 {
            x.round()
        } else {
            x.ceil()
        };
        (w as u64).clamp(1, self.total_steps)
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::InvalidArgument(format!(
                "step {step} outside [0, {}]",
                self.total_steps
            )));
        }
        let w = self.warmup_steps();
        if step < w {
            return Ok(step as f64 / w as f64 * self.base_lr);
        }
        let tail = self.total_steps - w;
        if tail == 0 {
            // single-step schedule: the peak coincides with the end
            return Ok(if step == self.total_steps { 0.0 } else { self.base_lr });
        }
        Ok((self.total_steps - step) as f64 / tail as f64 * self.base_lr)
    }
}
