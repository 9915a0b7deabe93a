use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Denoising grid from `s = 1` (pure noise) down to `s = 0` (data).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct Schedule {
    s_values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleRepr {
    n_steps: usize,
}

impl TryFrom<ScheduleRepr> for Schedule {
    type Error = Error;
    fn try_from(r: ScheduleRepr) -> Result<Self> {
        Schedule::uniform(r.n_steps)
    }
}

impl From<Schedule> for ScheduleRepr {
    fn from(s: Schedule) -> Self {
        ScheduleRepr { n_steps: s.n_steps() }
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::uniform(20).expect("positive step count")
    }
}

impl Schedule {
    /// Uniform grid `s_i = 1 − i/n`, `i = 0..=n`.
    pub fn uniform(n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Schedule("need at least one step".into()));
        }
        let n = n_steps as f64;
        Self::from_values((0..=n_steps).map(|i| 1.0 - i as f64 / n).collect())
    }

    pub fn from_values(s_values: Vec<f64>) -> Result<Self> {
        if s_values.len() < 2 {
            return Err(Error::Schedule("need at least two grid points".into()));
        }
        if s_values[0] != 1.0 || *s_values.last().expect("non-empty") != 0.0 {
            return Err(Error::Schedule("grid must start at 1 and end at 0".into()));
        }
        if s_values.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Schedule("grid must be strictly decreasing".into()));
        }
        Ok(Self { s_values })
    }

    /// Number of model evaluations.
    pub fn n_steps(&self) -> usize {
        self.s_values.len() - 1
    }

    pub fn s_values(&self) -> &[f64] {
        &self.s_values
    }

    /// Noise level at which step `i` evaluates the model.
    pub fn s(&self, step: usize) -> f64 {
        self.s_values[step]
    }

    /// Signed step size `s_{i+1} − s_i` (negative).
    pub fn delta(&self, step: usize) -> f64 {
        self.s_values[step + 1] - self.s_values[step]
    }

    /// Noise scale of the linear path.
    pub fn sigma(s: f64) -> f64 {
        s
    }
}
