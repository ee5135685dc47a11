//! Euler sampling with full or per-group cached network evaluation.

use serde::{Deserialize, Serialize};

use super::history::GroupHistory;
use super::model::SyntheticModel;
use super::schedule::SigmaSchedule;
use crate::error::{Error, Result};
use crate::jvp::{adaptive_k, group_estimate, meancache_estimate, AdaptiveKPolicy};
use crate::latent::LatentState;
use crate::profiler::StabilityMap;

/// `x + (σ_next − σ_t) · v`.
pub fn euler_step(x: &LatentState, v: &LatentState, sigma_t: f64, sigma_next: f64) -> Result<LatentState> {
    if !(sigma_next < sigma_t) {
        return Err(Error::config(format!(
            "sigma must decrease across a step ({sigma_t} -> {sigma_next})"
        )));
    }
    let next = x.axpy(sigma_next - sigma_t, v)?;
    if !next.is_finite() {
        return Err(Error::NonFinite {
            group: None,
            step: None,
        });
    }
    Ok(next)
}

/// Group-boundary states and velocities captured at every step of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTrace {
    /// Sigma at which each step evaluated the network.
    pub sigmas: Vec<f64>,
    /// `hidden[t][g]`.
    pub hidden: Vec<Vec<LatentState>>,
    pub velocity: Vec<LatentState>,
}

impl GroupTrace {
    pub fn steps(&self) -> usize {
        self.hidden.len()
    }
}

#[derive(Debug, Clone)]
pub struct FullRun {
    /// `x_0 … x_T`.
    pub trajectory: Vec<LatentState>,
    pub trace: GroupTrace,
}

impl FullRun {
    pub fn final_state(&self) -> &LatentState {
        self.trajectory.last().expect("trajectory holds x_0")
    }
}

/// Baseline sampler: every group computed at every step.
pub fn run_full(model: &SyntheticModel, schedule: &SigmaSchedule, x0: &LatentState) -> Result<FullRun> {
    let steps = schedule.steps();
    let mut trajectory = Vec::with_capacity(steps + 1);
    let mut trace = GroupTrace {
        sigmas: Vec::with_capacity(steps),
        hidden: Vec::with_capacity(steps),
        velocity: Vec::with_capacity(steps),
    };
    trajectory.push(x0.clone());
    for t in 0..steps {
        let (sigma, next) = (schedule.sigma(t), schedule.sigma(t + 1));
        let x = &trajectory[t];
        let out = model.forward(x, sigma, true).map_err(|e| e.at_step(t))?;
        let x_next = euler_step(x, &out.velocity, sigma, next).map_err(|e| e.at_step(t))?;
        trace.sigmas.push(sigma);
        trace.hidden.push(out.group_outputs.expect("capture requested"));
        trace.velocity.push(out.velocity);
        trajectory.push(x_next);
    }
    Ok(FullRun { trajectory, trace })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimationMode {
    /// Each cached group is extrapolated from its own history.
    LayerCache,
    /// Fully cached steps extrapolate the output velocity instead.
    MeanCache,
}

#[derive(Debug, Clone, Copy)]
pub struct CacheOptions<'a> {
    pub mode: EstimationMode,
    pub policy: AdaptiveKPolicy,
    /// Profiled change rates driving span selection; `None` always uses
    /// `k_max`. A single-group map applies to every group.
    pub profile: Option<&'a StabilityMap>,
}

impl<'a> CacheOptions<'a> {
    pub fn new(mode: EstimationMode, policy: AdaptiveKPolicy, profile: Option<&'a StabilityMap>) -> Self {
        Self {
            mode,
            policy,
            profile,
        }
    }

    fn span(&self, group: usize, step: usize) -> Result<usize> {
        match self.profile {
            None => Ok(self.policy.k_max),
            Some(map) => {
                let g = if map.groups == 1 { 0 } else { group };
                adaptive_k(map.delta_at(g, step), &self.policy)
            }
        }
    }

    /// Span for a whole-network estimate: the most conservative group span.
    fn velocity_span(&self, groups: usize, step: usize) -> Result<usize> {
        let mut k = self.policy.k_max;
        for g in 0..groups {
            k = k.min(self.span(g, step)?);
        }
        Ok(k)
    }
}

/// One extrapolated group output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEstimate {
    pub group: usize,
    pub span: usize,
    /// Step of the older record the slope was taken from.
    pub back_step: usize,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub sigma: f64,
    /// Groups whose layers actually ran.
    pub computed: Vec<bool>,
    pub estimated: Vec<GroupEstimate>,
    /// Cached cells that ran anyway because history was too short.
    pub fallbacks: Vec<usize>,
    /// Span of a whole-network velocity estimate, if one replaced the pass.
    pub velocity_span: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct CachedRun {
    pub final_state: LatentState,
    pub log: Vec<StepRecord>,
}

impl CachedRun {
    pub fn fallback_count(&self) -> usize {
        self.log.iter().map(|r| r.fallbacks.len()).sum()
    }

    /// Number of group evaluations that actually ran.
    pub fn computed_cells(&self) -> usize {
        self.log
            .iter()
            .map(|r| r.computed.iter().filter(|&&c| c).count())
            .sum()
    }
}

/// Hooks into a cached run; used by diagnostics.
pub trait CacheObserver {
    /// Called for every group evaluation or estimate, in order.
    fn on_group(
        &mut self,
        _step: usize,
        _group: usize,
        _sigma: f64,
        _input: &LatentState,
        _output: &LatentState,
        _estimated: bool,
    ) -> Result<()> {
        Ok(())
    }

    /// Called with the state a step starts from.
    fn on_step(&mut self, _step: usize, _sigma: f64, _x: &LatentState) -> Result<()> {
        Ok(())
    }
}

struct NoObserver;

impl CacheObserver for NoObserver {}

/// Sampler following a compute/cache plan `plan[t][g]` (true = compute).
pub fn run_cached(
    model: &SyntheticModel,
    schedule: &SigmaSchedule,
    x0: &LatentState,
    plan: &[Vec<bool>],
    options: &CacheOptions,
) -> Result<CachedRun> {
    run_cached_observed(model, schedule, x0, plan, options, &mut NoObserver)
}

fn check_plan(model: &SyntheticModel, schedule: &SigmaSchedule, plan: &[Vec<bool>], options: &CacheOptions) -> Result<()> {
    let (steps, groups) = (schedule.steps(), model.num_groups());
    if plan.len() != steps || plan.iter().any(|row| row.len() != groups) {
        return Err(Error::config(format!(
            "plan is not {steps} steps by {groups} groups"
        )));
    }
    if plan[0].iter().any(|&d| !d) {
        return Err(Error::config("every group must be computed at step 0"));
    }
    options.policy.validate()?;
    if let Some(map) = options.profile {
        if map.steps != steps || (map.groups != 1 && map.groups != groups) {
            return Err(Error::config(format!(
                "profile is {} steps by {} groups; run is {steps} by {groups}",
                map.steps, map.groups
            )));
        }
    }
    Ok(())
}

pub fn run_cached_observed(
    model: &SyntheticModel,
    schedule: &SigmaSchedule,
    x0: &LatentState,
    plan: &[Vec<bool>],
    options: &CacheOptions,
    observer: &mut dyn CacheObserver,
) -> Result<CachedRun> {
    check_plan(model, schedule, plan, options)?;
    let groups = model.num_groups();
    let capacity = options.policy.k_max + 1;
    let mut history = GroupHistory::new(groups, capacity)?;
    let mut velocities = GroupHistory::new(1, capacity)?;
    let mut x = x0.clone();
    let mut log = Vec::with_capacity(plan.len());

    for (t, row) in plan.iter().enumerate() {
        let (sigma, next) = (schedule.sigma(t), schedule.sigma(t + 1));
        observer.on_step(t, sigma, &x)?;
        let mut record = StepRecord {
            step: t,
            sigma,
            computed: vec![false; groups],
            estimated: Vec::new(),
            fallbacks: Vec::new(),
            velocity_span: None,
        };

        let whole_network = options.mode == EstimationMode::MeanCache && row.iter().all(|&d| !d);
        let velocity = if whole_network && velocities.len(0) >= 2 {
            let span = options.velocity_span(groups, t)?;
            record.velocity_span = Some(span);
            meancache_estimate(velocities.records(0), span, sigma).map_err(|e| e.at_step(t))?
        } else {
            let mut h = x.clone();
            for g in 0..groups {
                let cached = !row[g] && !whole_network;
                let estimate = if cached && history.len(g) >= 2 {
                    let span = options.span(g, t)?;
                    let (value, slope) = group_estimate(&history, g, sigma, span).map_err(|e| e.at_step(t))?;
                    record.estimated.push(GroupEstimate {
                        group: g,
                        span,
                        back_step: slope.back_step,
                        clamped: slope.clamped,
                    });
                    Some(value)
                } else {
                    None
                };
                let out = match estimate {
                    Some(value) => {
                        observer.on_group(t, g, sigma, &h, &value, true)?;
                        value
                    }
                    None => {
                        if !row[g] {
                            record.fallbacks.push(g);
                        }
                        let value = model.group_forward(g, &h, sigma).map_err(|e| e.at_step(t))?;
                        observer.on_group(t, g, sigma, &h, &value, false)?;
                        history.commit(g, t, sigma, value.clone())?;
                        record.computed[g] = true;
                        value
                    }
                };
                h = out;
            }
            let v = model.readout(&h).map_err(|e| e.at_step(t))?;
            if record.computed.iter().all(|&c| c) {
                velocities.commit(0, t, sigma, v.clone())?;
            }
            v
        };
        x = euler_step(&x, &velocity, sigma, next).map_err(|e| e.at_step(t))?;
        log.push(record);
    }
    Ok(CachedRun { final_state: x, log })
}
