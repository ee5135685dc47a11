//! Per-group change rates and the pairwise stability map.

mod fixture;

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::latent::LatentState;
use crate::sim::GroupTrace;

pub use fixture::{reference_statistics_map, TARGET_SUMMARY};

pub const DEFAULT_EPSILON: f64 = 1e-8;

/// `‖h_t − h_prev‖ / max(‖h_t‖, ε)`.
pub fn velocity_change_rate(h_t: &LatentState, h_prev: &LatentState, epsilon: f64) -> Result<f64> {
    pairwise_drift(h_t, h_prev, epsilon)
}

/// Relative drift of a state at step `t` from an earlier state at step `s`.
pub fn pairwise_drift(h_t: &LatentState, h_s: &LatentState, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::config(format!("epsilon must be positive, got {epsilon}")));
    }
    let num = h_t.distance(h_s)?;
    Ok(num / h_t.norm().max(epsilon))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub max: f64,
}

impl GroupSummary {
    pub fn of(series: &[f64]) -> Self {
        if series.is_empty() {
            return Self {
                mean: 0.0,
                std: 0.0,
                max: 0.0,
            };
        }
        let n = series.len() as f64;
        let mean = series.iter().sum::<f64>() / n;
        let var = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let max = series.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Self {
            mean,
            std: var.sqrt(),
            max,
        }
    }
}

/// Pairwise drift tensor `S[g][s][t]` with the adjacent-step series and its
/// summary. `delta[g][t − 1]` holds the change rate at step `t ≥ 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityMap {
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(rename = "G")]
    pub groups: usize,
    pub epsilon: f64,
    pub runs: usize,
    pub delta: Vec<Vec<f64>>,
    #[serde(rename = "S")]
    pub drift: Vec<Vec<Vec<f64>>>,
    pub summary: Vec<GroupSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

impl StabilityMap {
    /// Derive `delta` and `summary` from a full drift tensor (`G × T × T`,
    /// zero on and below the diagonal).
    pub fn from_drift(drift: Vec<Vec<Vec<f64>>>, epsilon: f64, runs: usize) -> Result<Self> {
        let groups = drift.len();
        let steps = drift.first().map_or(0, |g| g.len());
        let delta: Vec<Vec<f64>> = drift
            .iter()
            .map(|sg| (1..steps).map(|t| sg.get(t - 1).and_then(|r| r.get(t)).copied().unwrap_or(f64::NAN)).collect())
            .collect();
        let summary = delta.iter().map(|d| GroupSummary::of(d)).collect();
        let map = Self {
            steps,
            groups,
            epsilon,
            runs,
            delta,
            drift,
            summary,
            meta: None,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.steps == 0 {
            return Err(Error::config("stability map needs T >= 1 and G >= 1"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("stability map epsilon must be positive"));
        }
        if self.drift.len() != self.groups
            || self.delta.len() != self.groups
            || self.summary.len() != self.groups
        {
            return Err(Error::config(format!(
                "stability map declares G = {} but stores {}/{}/{} groups",
                self.groups,
                self.drift.len(),
                self.delta.len(),
                self.summary.len()
            )));
        }
        for g in 0..self.groups {
            let sg = &self.drift[g];
            if sg.len() != self.steps || sg.iter().any(|row| row.len() != self.steps) {
                return Err(Error::config(format!("group {g}: S is not {0}x{0}", self.steps)));
            }
            if self.delta[g].len() != self.steps - 1 {
                return Err(Error::config(format!(
                    "group {g}: delta has {} entries, expected {}",
                    self.delta[g].len(),
                    self.steps - 1
                )));
            }
            for (s, row) in sg.iter().enumerate() {
                for (t, &v) in row.iter().enumerate() {
                    if !v.is_finite() || v < 0.0 {
                        return Err(Error::config(format!(
                            "group {g}: S[{s}][{t}] = {v} is not a finite non-negative drift"
                        )));
                    }
                    if t <= s && v != 0.0 {
                        return Err(Error::config(format!(
                            "group {g}: S[{s}][{t}] must be zero for s >= t"
                        )));
                    }
                }
            }
            for t in 1..self.steps {
                if self.delta[g][t - 1] != sg[t - 1][t] {
                    return Err(Error::config(format!(
                        "group {g}: delta at step {t} disagrees with S"
                    )));
                }
            }
        }
        Ok(())
    }

    /// `S[g][s][t]`.
    pub fn drift(&self, group: usize, s: usize, t: usize) -> f64 {
        self.drift[group][s][t]
    }

    /// Change rate of `group` at step `t ≥ 1`.
    pub fn delta_at(&self, group: usize, t: usize) -> f64 {
        self.delta[group][t - 1]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: Self = serde_json::from_str(text)?;
        map.validate()?;
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Hex SHA-256 of the map's JSON without its meta block.
    pub fn fingerprint(&self) -> String {
        let mut bare = self.clone();
        bare.meta = None;
        let text = serde_json::to_string(&bare).expect("map serializes");
        hex_digest(text.as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn check_traces(traces: &[GroupTrace]) -> Result<(usize, usize)> {
    let first = traces
        .first()
        .ok_or_else(|| Error::config("at least one trace is required"))?;
    let steps = first.hidden.len();
    let groups = first.hidden.first().map_or(0, |h| h.len());
    if steps == 0 || groups == 0 {
        return Err(Error::config("trace is empty"));
    }
    let shape = first.hidden[0][0].shape().to_vec();
    for (r, tr) in traces.iter().enumerate() {
        if tr.hidden.len() != steps || tr.velocity.len() != steps {
            return Err(Error::config(format!(
                "trace {r} has {} steps, expected {steps}",
                tr.hidden.len()
            )));
        }
        for (t, row) in tr.hidden.iter().enumerate() {
            if row.len() != groups {
                return Err(Error::config(format!(
                    "trace {r} step {t} has {} groups, expected {groups}",
                    row.len()
                )));
            }
            if row.iter().chain(std::iter::once(&tr.velocity[t])).any(|h| h.shape() != shape) {
                return Err(Error::config(format!("trace {r} step {t} has a mismatched shape")));
            }
        }
    }
    Ok((steps, groups))
}

fn average_drift<'a>(
    runs: impl Iterator<Item = Vec<Vec<&'a LatentState>>>,
    steps: usize,
    groups: usize,
    epsilon: f64,
) -> Result<(Vec<Vec<Vec<f64>>>, usize)> {
    let mut acc = vec![vec![vec![0.0; steps]; steps]; groups];
    let mut n = 0usize;
    for series in runs {
        n += 1;
        let w = 1.0 / n as f64;
        for (g, states) in series.iter().enumerate() {
            for t in 1..steps {
                for s in 0..t {
                    let d = pairwise_drift(states[t], states[s], epsilon)?;
                    let m = &mut acc[g][s][t];
                    *m += (d - *m) * w;
                }
            }
        }
    }
    Ok((acc, n))
}

/// Average per-run drift maps over group-boundary traces.
pub fn build_stability_map(traces: &[GroupTrace], epsilon: f64) -> Result<StabilityMap> {
    let (steps, groups) = check_traces(traces)?;
    let runs = traces.iter().map(|tr| {
        (0..groups)
            .map(|g| tr.hidden.iter().map(|row| &row[g]).collect())
            .collect()
    });
    let (drift, n) = average_drift(runs, steps, groups, epsilon)?;
    StabilityMap::from_drift(drift, epsilon, n)
}

/// Single-group map over the network's output velocity.
pub fn build_velocity_map(traces: &[GroupTrace], epsilon: f64) -> Result<StabilityMap> {
    let (steps, _) = check_traces(traces)?;
    let runs = traces.iter().map(|tr| vec![tr.velocity.iter().collect()]);
    let (drift, n) = average_drift(runs, steps, 1, epsilon)?;
    StabilityMap::from_drift(drift, epsilon, n)
}
