//! End-to-end helpers: profile a model, plan at a budget, evaluate plans.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jvp::AdaptiveKPolicy;
use crate::latent::LatentState;
use crate::metrics::{attribute_error, psnr, ssim, QualityReport, SsimOptions};
use crate::profiler::{build_stability_map, build_velocity_map, StabilityMap, DEFAULT_EPSILON};
use crate::scheduler::{greedy_solve, GroupCosts, Schedule, ScheduleMeta};
use crate::sim::{run_cached, run_full, CacheOptions, EstimationMode, SigmaSchedule, SyntheticModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    LayerCache,
    MeanCache,
    Full,
}

impl RunMode {
    pub fn name(self) -> &'static str {
        match self {
            RunMode::LayerCache => "layercache",
            RunMode::MeanCache => "meancache",
            RunMode::Full => "full",
        }
    }
}

impl std::str::FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layercache" => Ok(RunMode::LayerCache),
            "meancache" => Ok(RunMode::MeanCache),
            "full" => Ok(RunMode::Full),
            other => Err(Error::config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Standard-normal starting latent shaped like the model's image.
pub fn initial_latent(shape: &[usize], seed: u64) -> LatentState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    LatentState::new(data, shape.to_vec()).expect("normal samples are finite")
}

/// Per-group and whole-network stability maps from the same runs.
#[derive(Debug, Clone)]
pub struct Profiles {
    pub groups: StabilityMap,
    pub velocity: StabilityMap,
}

/// Full runs from each seed, averaged into stability maps.
pub fn profile(model: &SyntheticModel, schedule: &SigmaSchedule, seeds: &[u64]) -> Result<Profiles> {
    let shape = model.image_shape();
    let traces = seeds
        .par_iter()
        .map(|&seed| run_full(model, schedule, &initial_latent(&shape, seed)).map(|r| r.trace))
        .collect::<Result<Vec<_>>>()?;
    Ok(Profiles {
        groups: build_stability_map(&traces, DEFAULT_EPSILON)?,
        velocity: build_velocity_map(&traces, DEFAULT_EPSILON)?,
    })
}

/// Whole-network plan: solve on the velocity map with unit step cost, then
/// give every group the same row decision.
pub fn plan_meancache(
    velocity_map: &StabilityMap,
    group_map: &StabilityMap,
    budget: f64,
    costs: &GroupCosts,
    gamma: f64,
) -> Result<Schedule> {
    let single = GroupCosts::uniform(1)?;
    let rows = greedy_solve(velocity_map, budget, &single, gamma)?;
    let d = rows
        .step_decisions
        .iter()
        .map(|row| vec![row[0]; costs.groups()])
        .collect();
    let mut plan = Schedule::from_decisions(d, group_map, costs)?;
    plan.meta = rows.meta;
    Ok(plan)
}

/// Layer-aware and whole-network plans at the same cost: the layer-aware
/// solver receives exactly what the whole-network plan spends.
pub fn matched_plans(profiles: &Profiles, budget: f64, costs: &GroupCosts, gamma: f64) -> Result<(Schedule, Schedule)> {
    let mean = plan_meancache(&profiles.velocity, &profiles.groups, budget, costs, gamma)?;
    let mut layer = greedy_solve(&profiles.groups, mean.total_cost, costs, gamma)?;
    if let Some(meta) = layer.meta.as_mut() {
        meta.budget = budget;
    }
    Ok((layer, mean))
}

/// Plan for one mode at a budget.
pub fn plan_for(mode: RunMode, profiles: &Profiles, budget: f64, costs: &GroupCosts, gamma: f64) -> Result<Schedule> {
    match mode {
        RunMode::LayerCache => matched_plans(profiles, budget, costs, gamma).map(|p| p.0),
        RunMode::MeanCache => matched_plans(profiles, budget, costs, gamma).map(|p| p.1),
        RunMode::Full => {
            let d = vec![vec![true; costs.groups()]; profiles.groups.steps];
            let mut plan = Schedule::from_decisions(d, &profiles.groups, costs)?;
            plan.meta = Some(ScheduleMeta {
                budget,
                gamma,
                fingerprint: profiles.groups.fingerprint(),
            });
            Ok(plan)
        }
    }
}

/// Cache options a mode runs with.
pub fn options_for<'a>(mode: RunMode, profiles: &'a Profiles, policy: AdaptiveKPolicy) -> CacheOptions<'a> {
    match mode {
        RunMode::MeanCache => CacheOptions::new(EstimationMode::MeanCache, policy, Some(&profiles.velocity)),
        _ => CacheOptions::new(EstimationMode::LayerCache, policy, Some(&profiles.groups)),
    }
}

/// Run the plan and the uncached baseline from `x0` and compare them.
pub fn evaluate(
    model: &SyntheticModel,
    schedule: &SigmaSchedule,
    x0: &LatentState,
    plan: &Schedule,
    options: &CacheOptions,
    with_attribution: bool,
) -> Result<QualityReport> {
    let reference = run_full(model, schedule, x0)?;
    let cached = run_cached(model, schedule, x0, &plan.step_decisions, options)?;
    let baseline = reference.final_state();
    let attribution = if with_attribution {
        attribute_error(model, schedule, x0, &plan.step_decisions, options)?.shares
    } else {
        vec![0.0; model.num_groups()]
    };
    Ok(QualityReport {
        psnr_db: psnr(baseline, &cached.final_state, None)?,
        ssim: ssim(baseline, &cached.final_state, &SsimOptions::default())?,
        lpips: None,
        per_group_attribution: attribution,
        modeled_speedup: plan.modeled_speedup(),
    })
}

/// Everything a sweep needs besides the budgets.
#[derive(Debug, Clone)]
pub struct SweepSetup<'a> {
    pub model: &'a SyntheticModel,
    pub schedule: &'a SigmaSchedule,
    pub profiles: &'a Profiles,
    pub costs: &'a GroupCosts,
    pub policy: AdaptiveKPolicy,
    pub gamma: f64,
    pub eval_seeds: &'a [u64],
    pub with_attribution: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub budget: f64,
    pub mode: RunMode,
    /// One report per evaluation seed, in seed order.
    pub reports: Vec<QualityReport>,
}

impl SweepCell {
    /// Report with every field averaged over seeds.
    pub fn mean_report(&self) -> QualityReport {
        let n = self.reports.len() as f64;
        let avg = |f: &dyn Fn(&QualityReport) -> f64| self.reports.iter().map(f).sum::<f64>() / n;
        let groups = self.reports.first().map_or(0, |r| r.per_group_attribution.len());
        QualityReport {
            psnr_db: avg(&|r| r.psnr_db),
            ssim: avg(&|r| r.ssim),
            lpips: None,
            per_group_attribution: (0..groups).map(|g| avg(&|r| r.per_group_attribution[g])).collect(),
            modeled_speedup: avg(&|r| r.modeled_speedup),
        }
    }
}

/// Evaluate one `(budget, mode)` cell.
pub fn sweep_cell(setup: &SweepSetup, budget: f64, mode: RunMode) -> Result<SweepCell> {
    let plan = plan_for(mode, setup.profiles, budget, setup.costs, setup.gamma)?;
    let options = options_for(mode, setup.profiles, setup.policy);
    let shape = setup.model.image_shape();
    let reports = setup
        .eval_seeds
        .iter()
        .map(|&seed| {
            let x0 = initial_latent(&shape, seed);
            evaluate(setup.model, setup.schedule, &x0, &plan, &options, setup.with_attribution)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepCell {
        budget,
        mode,
        reports,
    })
}

/// Evaluate every `(budget, mode)` pair in parallel; results come back in
/// budget-major, mode-minor order. Cells before the first failure are
/// returned alongside the error.
pub fn budget_sweep(setup: &SweepSetup, budgets: &[f64], modes: &[RunMode]) -> (Vec<SweepCell>, Option<Error>) {
    let jobs: Vec<(f64, RunMode)> = budgets
        .iter()
        .flat_map(|&b| modes.iter().map(move |&m| (b, m)))
        .collect();
    let results: Vec<Result<SweepCell>> = jobs.par_iter().map(|&(b, m)| sweep_cell(setup, b, m)).collect();
    let mut cells = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(cell) => cells.push(cell),
            Err(e) => return (cells, Some(e)),
        }
    }
    (cells, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::ModelConfig;

    fn small() -> (SyntheticModel, SigmaSchedule) {
        let mut c = ModelConfig::heterogeneous();
        c.state_dim = 256;
        (SyntheticModel::new(c).unwrap(), SigmaSchedule::linear(50).unwrap())
    }

    #[test]
    fn initial_latent_is_seeded() {
        assert_eq!(initial_latent(&[4, 4], 3), initial_latent(&[4, 4], 3));
        assert_ne!(initial_latent(&[4, 4], 3), initial_latent(&[4, 4], 4));
    }

    #[test]
    fn matched_plans_share_cost() {
        let (m, s) = small();
        let profiles = profile(&m, &s, &[0, 1]).unwrap();
        let costs = GroupCosts::uniform(3).unwrap();
        let (layer, mean) = matched_plans(&profiles, 25.0, &costs, 4.0).unwrap();
        assert!(layer.total_cost <= mean.total_cost + 1e-9);
        assert!(mean.total_cost <= 25.0 + 1e-9);
        assert!(mean.step_decisions.iter().all(|r| r.iter().all(|&d| d == r[0])));
    }

    #[test]
    fn full_mode_reports_the_cap() {
        let (m, s) = small();
        let profiles = profile(&m, &s, &[0]).unwrap();
        let costs = GroupCosts::uniform(3).unwrap();
        let plan = plan_for(RunMode::Full, &profiles, 50.0, &costs, 4.0).unwrap();
        let opts = options_for(RunMode::Full, &profiles, AdaptiveKPolicy::default());
        let r = evaluate(&m, &s, &initial_latent(&m.image_shape(), 9), &plan, &opts, true).unwrap();
        assert_eq!(r.psnr_db, crate::metrics::PSNR_CAP_DB);
        assert!((r.ssim - 1.0).abs() < 1e-12);
        assert_eq!(r.modeled_speedup, 1.0);
    }

    #[test]
    fn sweep_rows_are_ordered_and_failures_reported() {
        let (m, s) = small();
        let profiles = profile(&m, &s, &[0]).unwrap();
        let costs = GroupCosts::uniform(3).unwrap();
        let setup = SweepSetup {
            model: &m,
            schedule: &s,
            profiles: &profiles,
            costs: &costs,
            policy: AdaptiveKPolicy::default(),
            gamma: 4.0,
            eval_seeds: &[1],
            with_attribution: false,
        };
        let (cells, err) = budget_sweep(&setup, &[30.0, 20.0], &[RunMode::LayerCache, RunMode::MeanCache]);
        assert!(err.is_none());
        let order: Vec<(f64, RunMode)> = cells.iter().map(|c| (c.budget, c.mode)).collect();
        assert_eq!(
            order,
            vec![
                (30.0, RunMode::LayerCache),
                (30.0, RunMode::MeanCache),
                (20.0, RunMode::LayerCache),
                (20.0, RunMode::MeanCache)
            ]
        );
        let (cells, err) = budget_sweep(&setup, &[20.0, 0.5], &[RunMode::LayerCache]);
        assert_eq!(cells.len(), 1);
        assert!(matches!(err, Some(Error::InfeasibleBudget { .. })));
    }
}
