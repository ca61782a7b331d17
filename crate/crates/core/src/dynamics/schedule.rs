use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference step size `alpha_k = scale / (k + offset)^exponent`.
///
/// With `exponent` in `(1/2, 1]` the sequence vanishes, is not summable and is
/// square-summable. Construction also requires `alpha_0 < 1`; the sequence is
/// strictly decreasing so every later step is in `(0, 1)` too.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleParams", into = "ScheduleParams")]
pub struct StepSchedule {
    scale: f64,
    offset: f64,
    exponent: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleParams {
    pub scale: f64,
    pub offset: f64,
    pub exponent: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            scale: 1.0,
            offset: 2.0,
            exponent: 0.6,
        }
    }
}

impl StepSchedule {
    pub fn power_law(scale: f64, offset: f64, exponent: f64) -> Result<Self> {
        if !(exponent > 0.5 && exponent <= 1.0) {
            return Err(Error::config(format!(
                "step exponent {exponent} must lie in (0.5, 1]"
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) || !(offset > 0.0 && offset.is_finite()) {
            return Err(Error::config(format!(
                "step scale {scale} and offset {offset} must be positive"
            )));
        }
        let first = scale / offset.powf(exponent);
        if first >= 1.0 {
            return Err(Error::config(format!(
                "first step {first} must be below 1"
            )));
        }
        Ok(StepSchedule {
            scale,
            offset,
            exponent,
        })
    }

    #[inline]
    pub fn alpha(&self, stage: u64) -> f64 {
        self.scale / (stage as f64 + self.offset).powf(self.exponent)
    }

    pub fn params(&self) -> ScheduleParams {
        ScheduleParams {
            scale: self.scale,
            offset: self.offset,
            exponent: self.exponent,
        }
    }
}

impl Default for StepSchedule {
    fn default() -> Self {
        ScheduleParams::default().try_into().expect("default schedule is valid")
    }
}

impl TryFrom<ScheduleParams> for StepSchedule {
    type Error = Error;

    fn try_from(p: ScheduleParams) -> Result<Self> {
        StepSchedule::power_law(p.scale, p.offset, p.exponent)
    }
}

impl From<StepSchedule> for ScheduleParams {
    fn from(s: StepSchedule) -> Self {
        s.params()
    }
}
