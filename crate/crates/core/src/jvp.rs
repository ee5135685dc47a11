//! Span selection and first-order extrapolation from committed history.
//!
//! Every estimate here is a Taylor step in sigma,
//! `ĥ(σ_t) = h(σ_a) + slope · (σ_t − σ_a)`, with `slope` a finite difference
//! over the committed records.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::LatentState;
use crate::sim::{GroupHistory, HistoryRecord};

/// Maps a velocity change rate to a finite-difference span.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveKPolicy {
    pub tau_low: f64,
    pub tau_high: f64,
    pub k_max: usize,
    pub k_mid: usize,
    pub k_min: usize,
}

impl Default for AdaptiveKPolicy {
    fn default() -> Self {
        Self {
            tau_low: 0.10,
            tau_high: 0.20,
            k_max: 6,
            k_mid: 3,
            k_min: 1,
        }
    }
}

impl AdaptiveKPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_low.is_finite() && self.tau_high.is_finite()) {
            return Err(Error::config("thresholds must be finite"));
        }
        if !(0.0 < self.tau_low && self.tau_low < self.tau_high) {
            return Err(Error::config(format!(
                "need 0 < tau_low < tau_high, got {} and {}",
                self.tau_low, self.tau_high
            )));
        }
        if !(1 <= self.k_min && self.k_min <= self.k_mid && self.k_mid <= self.k_max) {
            return Err(Error::config(format!(
                "need 1 <= k_min <= k_mid <= k_max, got {}/{}/{}",
                self.k_min, self.k_mid, self.k_max
            )));
        }
        Ok(())
    }
}

/// Span for a group whose profiled change rate is `delta`.
pub fn adaptive_k(delta: f64, policy: &AdaptiveKPolicy) -> Result<usize> {
    policy.validate()?;
    if delta.is_nan() || delta < 0.0 {
        return Err(Error::config(format!("change rate must be >= 0, got {delta}")));
    }
    Ok(if delta < policy.tau_low {
        policy.k_max
    } else if delta < policy.tau_high {
        policy.k_mid
    } else {
        policy.k_min
    })
}

/// Finite-difference slope with the records it was taken between.
#[derive(Debug, Clone, PartialEq)]
pub struct Slope {
    pub value: LatentState,
    pub last_step: usize,
    pub back_step: usize,
    /// The requested span reached past the oldest record.
    pub clamped: bool,
}

fn slope_between(back: &HistoryRecord, last: &HistoryRecord) -> Result<LatentState> {
    let ds = last.sigma - back.sigma;
    if ds == 0.0 {
        return Err(Error::DegenerateSpacing { sigma: last.sigma });
    }
    let diff = last.hidden.sub(&back.hidden)?;
    let slope = diff.scaled(1.0 / ds);
    if !slope.is_finite() {
        return Err(Error::NonFinite {
            group: None,
            step: None,
        });
    }
    Ok(slope)
}

fn record_slope(records: &[HistoryRecord], group: usize, span_k: usize) -> Result<Slope> {
    if records.len() < 2 {
        return Err(Error::InsufficientHistory {
            group,
            available: records.len(),
        });
    }
    if span_k == 0 {
        return Err(Error::config("span must be at least 1"));
    }
    let last_idx = records.len() - 1;
    let clamped = span_k > last_idx;
    let back_idx = last_idx - span_k.min(last_idx);
    let (back, last) = (&records[back_idx], &records[last_idx]);
    Ok(Slope {
        value: slope_between(back, last)?,
        last_step: last.step,
        back_step: back.step,
        clamped,
    })
}

/// Slope of group `group` between its last committed record and the one
/// `span_k` records earlier.
pub fn group_jvp(history: &GroupHistory, group: usize, span_k: usize) -> Result<Slope> {
    if group >= history.num_groups() {
        return Err(Error::config(format!("history has no group {group}")));
    }
    record_slope(history.records(group), group, span_k)
}

/// Extrapolated group output at `sigma_t`, anchored on the last committed
/// record. Returns the slope used alongside the estimate.
pub fn group_estimate(
    history: &GroupHistory,
    group: usize,
    sigma_t: f64,
    span_k: usize,
) -> Result<(LatentState, Slope)> {
    let slope = group_jvp(history, group, span_k)?;
    let last = history.last(group).expect("slope implies records");
    if sigma_t >= last.sigma {
        return Err(Error::config(format!(
            "target sigma {sigma_t} does not follow the last committed sigma {}",
            last.sigma
        )));
    }
    let estimate = last.hidden.axpy(sigma_t - last.sigma, &slope.value)?;
    Ok((estimate, slope))
}

/// Average velocity `(x_t − x_s) / (t − s)` over an interval.
pub fn mean_velocity(x_s: &LatentState, x_t: &LatentState, s: f64, t: f64) -> Result<LatentState> {
    if t == s {
        return Err(Error::DegenerateInterval(t));
    }
    Ok(x_t.sub(x_s)?.scaled(1.0 / (t - s)))
}

/// Monolithic estimate from the velocity history: the mean over the last
/// `span_k` records plus the window slope times the offset from the
/// window's mean sigma. Affine-in-sigma histories are reproduced exactly.
pub fn meancache_estimate(
    records: &[HistoryRecord],
    span_k: usize,
    sigma_t: f64,
) -> Result<LatentState> {
    let slope = record_slope(records, 0, span_k)?;
    let window = span_k.max(1).min(records.len());
    let tail = &records[records.len() - window..];
    let inv = 1.0 / window as f64;
    let mut mean = tail[0].hidden.scaled(inv);
    for r in &tail[1..] {
        mean = mean.axpy(inv, &r.hidden)?;
    }
    let sigma_mean = tail.iter().map(|r| r.sigma).sum::<f64>() * inv;
    mean.axpy(sigma_t - sigma_mean, &slope.value)
}
