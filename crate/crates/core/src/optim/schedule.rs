use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Log-linear decay from `initial` to `final_rate` over `total_steps`, held at
/// `final_rate` afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(rename = "final")]
    pub final_rate: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(initial: f64, final_rate: f64, total_steps: usize) -> Result<Self> {
        let s = Self {
            initial,
            final_rate,
            total_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(rate: f64) -> Self {
        Self {
            initial: rate,
            final_rate: rate,
            total_steps: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0
            && self.final_rate > 0.0
            && self.initial.is_finite()
            && self.final_rate.is_finite())
        {
            return Err(Error::config(format!(
                "learning rates must be positive, got {} -> {}",
                self.initial, self.final_rate
            )));
        }
        Ok(())
    }

    pub fn rate(&self, step: usize) -> f64 {
        if step == 0 || self.initial == self.final_rate {
            return self.initial;
        }
        if step >= self.total_steps {
            return self.final_rate;
        }
        let t = step as f64 / self.total_steps as f64;
        (self.initial.ln() * (1.0 - t) + self.final_rate.ln() * t).exp()
    }

    /// Same curve stretched over a different number of steps.
    pub fn with_total(self, total_steps: usize) -> Self {
        Self {
            total_steps,
            ..self
        }
    }

    pub fn scaled(self, k: f64) -> Self {
        Self {
            initial: self.initial * k,
            final_rate: self.final_rate * k,
            ..self
        }
    }
}
