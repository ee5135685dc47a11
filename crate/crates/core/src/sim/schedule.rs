use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Strictly decreasing noise levels `σ_0 > σ_1 > … > σ_T ≥ 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SigmaSchedule {
    values: Vec<f64>,
}

impl SigmaSchedule {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::config("a sigma schedule needs at least two levels"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("sigma levels must be finite"));
        }
        if values[0] <= 0.0 {
            return Err(Error::config("the first sigma level must be positive"));
        }
        if *values.last().unwrap() < 0.0 {
            return Err(Error::config("the final sigma level must be non-negative"));
        }
        if let Some(i) = values.windows(2).position(|w| w[0] <= w[1]) {
            return Err(Error::config(format!(
                "sigma schedule is not strictly decreasing at index {i}"
            )));
        }
        Ok(Self { values })
    }

    /// `steps + 1` evenly spaced levels from 1 down to 0.
    pub fn linear(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("at least one step is required"));
        }
        let values = (0..=steps)
            .map(|i| 1.0 - i as f64 / steps as f64)
            .collect();
        Self::new(values)
    }

    /// Number of Euler steps `T`.
    pub fn steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `σ_{i+1} - σ_i`, always negative.
    pub fn step_size(&self, i: usize) -> f64 {
        self.values[i + 1] - self.values[i]
    }
}

impl TryFrom<Vec<f64>> for SigmaSchedule {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<SigmaSchedule> for Vec<f64> {
    fn from(s: SigmaSchedule) -> Self {
        s.values
    }
}
