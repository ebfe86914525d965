use core::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq)]
pub enum ScheduleError {
    Invalid(&'static str),
    EpochOutOfRange { epoch: usize, total: usize },
}

impl fmt::Display for ScheduleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleError::Invalid(msg) => write!(f, "invalid schedule: {msg}"),
            ScheduleError::EpochOutOfRange { epoch, total } => {
                write!(f, "epoch {epoch} outside schedule of {total} epochs")
            }
        }
    }
}

impl core::error::Error for ScheduleError {}

/// Piecewise-linear 1-cycle schedule: `lr_start` rises to `lr_peak` at
/// `peak_epoch`, then falls to `lr_end` at the last epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneCycleSchedule {
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_end: f64,
    pub peak_epoch: usize,
    pub total_epochs: usize,
}

impl OneCycleSchedule {
    pub fn new(
        lr_start: f64,
        lr_peak: f64,
        lr_end: f64,
        peak_epoch: usize,
        total_epochs: usize,
    ) -> Result<Self, ScheduleError> {
        let s = Self { lr_start, lr_peak, lr_end, peak_epoch, total_epochs };
        s.validate()?;
        Ok(s)
    }

    /// 1e-4 → 2e-4 at one fifth of training → 5e-6 at the end.
    pub fn reference(total_epochs: usize) -> Self {
        Self { lr_start: 1e-4, lr_peak: 2e-4, lr_end: 5e-6, peak_epoch: total_epochs / 5, total_epochs }
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if !(self.lr_end > 0.0) {
            return Err(ScheduleError::Invalid("final learning rate must be positive"));
        }
        if !(self.lr_start > 0.0 && self.lr_start <= self.lr_peak) {
            return Err(ScheduleError::Invalid("need 0 < start <= peak"));
        }
        if self.total_epochs == 0 || self.peak_epoch >= self.total_epochs {
            return Err(ScheduleError::Invalid("peak epoch must lie inside the run"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64, ScheduleError> {
        if epoch >= self.total_epochs {
            return Err(ScheduleError::EpochOutOfRange { epoch, total: self.total_epochs });
        }
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        if epoch <= self.peak_epoch {
            if self.peak_epoch == 0 {
                return Ok(self.lr_peak);
            }
            Ok(lerp(self.lr_start, self.lr_peak, epoch as f64 / self.peak_epoch as f64))
        } else {
            let span = (self.total_epochs - 1 - self.peak_epoch) as f64;
            Ok(lerp(self.lr_peak, self.lr_end, (epoch - self.peak_epoch) as f64 / span))
        }
    }
}

/// Learning rate as a function of the epoch index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant(f64),
    OneCycle(OneCycleSchedule),
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> Result<f64, ScheduleError> {
        match self {
            LrSchedule::Constant(lr) if *lr > 0.0 => Ok(*lr),
            LrSchedule::Constant(_) => Err(ScheduleError::Invalid("learning rate must be positive")),
            LrSchedule::OneCycle(s) => s.lr_at(epoch),
        }
    }

    pub fn validate(&self, epochs: usize) -> Result<(), ScheduleError> {
        match self {
            LrSchedule::Constant(lr) if *lr > 0.0 => Ok(()),
            LrSchedule::Constant(_) => Err(ScheduleError::Invalid("learning rate must be positive")),
            LrSchedule::OneCycle(s) => {
                s.validate()?;
                if s.total_epochs != epochs {
                    return Err(ScheduleError::Invalid("schedule length differs from the epoch count"));
                }
                Ok(())
            }
        }
    }
}
