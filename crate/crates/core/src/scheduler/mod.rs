//! Cost and error models over compute/cache plans and the budgeted solvers.

mod brute;
mod io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profiler::StabilityMap;

pub use brute::{brute_force_solve, BRUTE_FORCE_CELL_LIMIT};
pub use io::meta_path;

/// Slack when comparing accumulated costs against the budget.
pub const BUDGET_EPS: f64 = 1e-9;

pub const DEFAULT_GAMMA: f64 = 4.0;

/// `decisions[t][g]`: true computes group `g` at step `t`, false caches it.
pub type Decisions = Vec<Vec<bool>>;

/// Per-group cost (fraction of one full pass) and error weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCosts {
    pub c: Vec<f64>,
    pub w: Vec<f64>,
}

impl GroupCosts {
    pub fn new(c: Vec<f64>, w: Vec<f64>) -> Result<Self> {
        let costs = Self { c, w };
        costs.validate()?;
        Ok(costs)
    }

    pub fn uniform(groups: usize) -> Result<Self> {
        Self::new(vec![1.0 / groups as f64; groups], vec![1.0; groups])
    }

    /// Costs proportional to layer counts, unit weights.
    pub fn from_layers(layers: &[usize]) -> Result<Self> {
        let total: usize = layers.iter().sum();
        if total == 0 {
            return Err(Error::config("layer counts sum to zero"));
        }
        Self::new(
            layers.iter().map(|&l| l as f64 / total as f64).collect(),
            vec![1.0; layers.len()],
        )
    }

    pub fn groups(&self) -> usize {
        self.c.len()
    }

    /// Cost of one full step; 1 up to rounding.
    pub fn step_cost(&self) -> f64 {
        self.c.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.c.is_empty() || self.c.len() != self.w.len() {
            return Err(Error::config(format!(
                "{} costs and {} weights given",
                self.c.len(),
                self.w.len()
            )));
        }
        if self.c.iter().chain(&self.w).any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::config("costs and weights must be positive and finite"));
        }
        let sum = self.step_cost();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("group costs sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleMeta {
    pub budget: f64,
    pub gamma: f64,
    /// Fingerprint of the stability map the plan was solved against.
    pub fingerprint: String,
}

/// A compute/cache plan with its derived gaps, cost and modeled error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub step_decisions: Decisions,
    /// 0 at computed cells, otherwise steps since the group last ran.
    pub k_values: Vec<Vec<usize>>,
    pub total_cost: f64,
    pub total_error: f64,
    #[serde(skip)]
    pub meta: Option<ScheduleMeta>,
}

fn check_decisions(d: &[Vec<bool>], groups: usize) -> Result<()> {
    if d.is_empty() || d.iter().any(|row| row.len() != groups) {
        return Err(Error::config(format!("decision matrix is not T x {groups}")));
    }
    if d[0].iter().any(|&x| !x) {
        return Err(Error::config("every group must be computed at step 0"));
    }
    Ok(())
}

fn check_map(map: &StabilityMap, costs: &GroupCosts) -> Result<()> {
    costs.validate()?;
    if map.groups != costs.groups() {
        return Err(Error::config(format!(
            "map has {} groups but {} costs were given",
            map.groups,
            costs.groups()
        )));
    }
    Ok(())
}

/// Steps since the last computed step, 0 at computed cells.
pub fn k_values(d: &[Vec<bool>]) -> Vec<Vec<usize>> {
    let groups = d.first().map_or(0, |r| r.len());
    let mut last = vec![0usize; groups];
    d.iter()
        .enumerate()
        .map(|(t, row)| {
            row.iter()
                .enumerate()
                .map(|(g, &compute)| {
                    if compute {
                        last[g] = t;
                        0
                    } else {
                        t - last[g]
                    }
                })
                .collect()
        })
        .collect()
}

/// `Σ_t Σ_g d[t][g] · c_g`.
pub fn total_cost(d: &[Vec<bool>], costs: &GroupCosts) -> Result<f64> {
    check_decisions(d, costs.groups())?;
    Ok(compensated_sum(d.iter().flat_map(|row| {
        row.iter()
            .zip(&costs.c)
            .filter(|(&compute, _)| compute)
            .map(|(_, &c)| c)
    })))
}

/// Neumaier summation; keeps e.g. 150 thirds at exactly 50.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

/// Sum over cached cells of `w_g · S[g][s][t]`, `s` the group's last
/// computed step before `t`.
pub fn total_error(d: &[Vec<bool>], map: &StabilityMap, costs: &GroupCosts) -> Result<f64> {
    check_map(map, costs)?;
    check_decisions(d, costs.groups())?;
    if d.len() != map.steps {
        return Err(Error::config(format!(
            "plan has {} steps, map has {}",
            d.len(),
            map.steps
        )));
    }
    let mut last = vec![0usize; costs.groups()];
    let mut total = 0.0;
    for (t, row) in d.iter().enumerate() {
        for (g, &compute) in row.iter().enumerate() {
            if compute {
                last[g] = t;
            } else {
                total += costs.w[g] * map.drift(g, last[g], t);
            }
        }
    }
    Ok(total)
}

fn cell_score(map: &StabilityMap, costs: &GroupCosts, gamma: f64, g: usize, s: usize, t: usize) -> f64 {
    costs.w[g] * map.drift(g, s, t).powf(gamma) / costs.c[g]
}

/// Benefit-to-cost ratio of computing the cached cell `(t, g)`.
pub fn score(
    t: usize,
    g: usize,
    d: &[Vec<bool>],
    map: &StabilityMap,
    costs: &GroupCosts,
    gamma: f64,
) -> Result<f64> {
    check_map(map, costs)?;
    if t == 0 || t >= d.len() || g >= costs.groups() || d[t][g] {
        return Err(Error::config(format!("({t}, {g}) is not a cached cell")));
    }
    let s = (0..t).rev().find(|&s| d[s][g]).unwrap_or(0);
    Ok(cell_score(map, costs, gamma, g, s, t))
}

impl Schedule {
    /// Derive gaps, cost and error for a decision matrix.
    pub fn from_decisions(d: Decisions, map: &StabilityMap, costs: &GroupCosts) -> Result<Self> {
        let total_error = total_error(&d, map, costs)?;
        let total_cost = total_cost(&d, costs)?;
        Ok(Self {
            k_values: k_values(&d),
            step_decisions: d,
            total_cost,
            total_error,
            meta: None,
        })
    }

    pub fn steps(&self) -> usize {
        self.step_decisions.len()
    }

    pub fn groups(&self) -> usize {
        self.step_decisions.first().map_or(0, |r| r.len())
    }

    /// Structural checks: first row computed, gaps consistent with decisions.
    pub fn validate(&self) -> Result<()> {
        check_decisions(&self.step_decisions, self.groups())?;
        if self.k_values != k_values(&self.step_decisions) {
            return Err(Error::config("k_values do not match step_decisions"));
        }
        if !(self.total_cost.is_finite() && self.total_error.is_finite()) {
            return Err(Error::config("schedule totals must be finite"));
        }
        Ok(())
    }

    /// Fraction of steps at which each group is cached.
    pub fn cache_rates(&self) -> Vec<f64> {
        let steps = self.steps() as f64;
        (0..self.groups())
            .map(|g| self.step_decisions.iter().filter(|row| !row[g]).count() as f64 / steps)
            .collect()
    }

    /// `T / total_cost`.
    pub fn modeled_speedup(&self) -> f64 {
        modeled_speedup(self, self.steps())
    }
}

pub fn modeled_speedup(plan: &Schedule, steps: usize) -> f64 {
    steps as f64 / plan.total_cost
}

fn check_solver_inputs(map: &StabilityMap, budget: f64, costs: &GroupCosts, gamma: f64) -> Result<()> {
    map.validate()?;
    check_map(map, costs)?;
    if !(gamma.is_finite() && gamma >= 1.0) {
        return Err(Error::config(format!("gamma must be >= 1, got {gamma}")));
    }
    if budget.is_nan() {
        return Err(Error::config("budget is NaN"));
    }
    let required = costs.step_cost();
    if budget + BUDGET_EPS < required {
        return Err(Error::InfeasibleBudget { budget, required });
    }
    Ok(())
}

/// Repeatedly compute the highest-scoring cached cell that still fits the
/// budget, rescoring after each assignment. Ties go to the lower step, then
/// the lower group.
pub fn greedy_solve(map: &StabilityMap, budget: f64, costs: &GroupCosts, gamma: f64) -> Result<Schedule> {
    check_solver_inputs(map, budget, costs, gamma)?;
    let (steps, groups) = (map.steps, map.groups);
    let mut d = vec![vec![false; groups]; steps];
    d[0] = vec![true; groups];
    let mut remaining = budget - costs.step_cost();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        let mut last = vec![0usize; groups];
        for t in 1..steps {
            for g in 0..groups {
                if d[t][g] {
                    last[g] = t;
                    continue;
                }
                if costs.c[g] > remaining + BUDGET_EPS {
                    continue;
                }
                let sc = cell_score(map, costs, gamma, g, last[g], t);
                if best.is_none_or(|(b, _, _)| sc > b) {
                    best = Some((sc, t, g));
                }
            }
        }
        let Some((_, t, g)) = best else { break };
        d[t][g] = true;
        remaining -= costs.c[g];
    }
    let mut schedule = Schedule::from_decisions(d, map, costs)?;
    schedule.meta = Some(ScheduleMeta {
        budget,
        gamma,
        fingerprint: map.fingerprint(),
    });
    Ok(schedule)
}

/// Baseline that computes `⌊B⌋` evenly spaced full steps and caches the rest.
pub fn even_schedule(map: &StabilityMap, budget: f64, costs: &GroupCosts) -> Result<Schedule> {
    check_solver_inputs(map, budget, costs, 1.0)?;
    let steps = map.steps;
    let full = ((budget / costs.step_cost() + BUDGET_EPS).floor() as usize).clamp(1, steps);
    let mut d = vec![vec![false; map.groups]; steps];
    for i in 0..full {
        d[i * steps / full] = vec![true; map.groups];
    }
    Schedule::from_decisions(d, map, costs)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_map(steps: usize, groups: usize, seed: u64) -> StabilityMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let drift = (0..groups)
            .map(|_| {
                (0..steps)
                    .map(|s| (0..steps).map(|t| if t > s { rng.random_range(0.0..1.0) } else { 0.0 }).collect())
                    .collect()
            })
            .collect();
        StabilityMap::from_drift(drift, 1e-8, 1).unwrap()
    }

    fn map_with(drift: Vec<Vec<Vec<f64>>>) -> StabilityMap {
        StabilityMap::from_drift(drift, 1e-8, 1).unwrap()
    }

    fn zero_map(steps: usize, groups: usize) -> StabilityMap {
        map_with(vec![vec![vec![0.0; steps]; steps]; groups])
    }

    #[test]
    fn cost_examples() {
        let thirds = GroupCosts::uniform(3).unwrap();
        let all = vec![vec![true; 3]; 50];
        assert_eq!(total_cost(&all, &thirds).unwrap(), 50.0);
        let mut first = vec![vec![false; 3]; 50];
        first[0] = vec![true; 3];
        assert!((total_cost(&first, &thirds).unwrap() - 1.0).abs() < 1e-12);

        // 2, 24 and 50 computed steps for the three groups
        let d: Decisions = (0..50).map(|t| vec![t == 0 || t == 25, t % 2 == 0 && t < 48, true]).collect();
        let cost = total_cost(&d, &thirds).unwrap();
        assert!((cost - 76.0 / 3.0).abs() < 1e-9);
        assert!((cost - 25.0).abs() <= 1.0 / 3.0 + 1e-9);
    }

    #[test]
    fn error_examples() {
        let costs = GroupCosts::uniform(1).unwrap();
        let mut drift = vec![vec![vec![0.0; 3]; 3]];
        drift[0][0][1] = 0.2;
        drift[0][0][2] = 0.7;
        drift[0][1][2] = 0.4;
        let map = map_with(drift);
        let d = vec![vec![true], vec![false], vec![true]];
        assert!((total_error(&d, &map, &costs).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(total_error(&vec![vec![true]; 3], &map, &costs).unwrap(), 0.0);

        let zero = zero_map(5, 2);
        let sparse: Decisions = (0..5).map(|t| vec![t == 0, t % 2 == 0]).collect();
        assert_eq!(total_error(&sparse, &zero, &GroupCosts::uniform(2).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn score_examples() {
        let costs = GroupCosts::uniform(3).unwrap();
        let mut drift = vec![vec![vec![0.0; 2]; 2]; 3];
        drift[1][0][1] = 0.5;
        let map = map_with(drift);
        let d = vec![vec![true; 3], vec![false; 3]];
        assert!((score(1, 1, &d, &map, &costs, 4.0).unwrap() - 0.1875).abs() < 1e-12);
        assert_eq!(score(1, 0, &d, &map, &costs, 4.0).unwrap(), 0.0);
        assert!(score(0, 0, &d, &map, &costs, 4.0).is_err());
    }

    #[test]
    fn larger_gamma_favours_large_drift() {
        let costs = GroupCosts::uniform(2).unwrap();
        let d = vec![vec![true; 2], vec![false; 2]];
        for small in [0.1, 0.5, 0.99] {
            let mut drift = vec![vec![vec![0.0; 2]; 2]; 2];
            drift[0][0][1] = small;
            drift[1][0][1] = 1.0;
            let map = map_with(drift);
            let ratio = |gamma| {
                score(1, 0, &d, &map, &costs, gamma).unwrap() / score(1, 1, &d, &map, &costs, gamma).unwrap()
            };
            assert!(ratio(4.0) < ratio(2.0));
        }
    }

    #[test]
    fn full_and_minimum_budgets() {
        let map = random_map(10, 3, 1);
        let costs = GroupCosts::uniform(3).unwrap();
        let full = greedy_solve(&map, 10.0, &costs, 4.0).unwrap();
        assert!(full.step_decisions.iter().flatten().all(|&x| x));
        assert_eq!(full.total_error, 0.0);
        assert_eq!(full.modeled_speedup(), 10.0 / full.total_cost);

        let min = greedy_solve(&map, 1.0, &costs, 4.0).unwrap();
        assert_eq!(min.step_decisions.iter().flatten().filter(|&&x| x).count(), 3);
        assert!(matches!(
            greedy_solve(&map, 0.5, &costs, 4.0),
            Err(Error::InfeasibleBudget { .. })
        ));
        assert!(greedy_solve(&map, 5.0, &costs, 0.5).is_err());
    }

    #[test]
    fn speedup_arithmetic() {
        let map = zero_map(50, 1);
        let mut plan = even_schedule(&map, 25.0, &GroupCosts::uniform(1).unwrap()).unwrap();
        assert!((plan.total_cost - 25.0).abs() < 1e-12);
        assert!((modeled_speedup(&plan, 50) - 2.0).abs() < 1e-12);
        plan.total_cost = 50.0;
        assert_eq!(modeled_speedup(&plan, 50), 1.0);
    }

    #[test]
    fn ties_go_to_the_earliest_cell() {
        let map = map_with(vec![vec![vec![0.0; 4]; 4]; 2]);
        let costs = GroupCosts::uniform(2).unwrap();
        let plan = greedy_solve(&map, 1.5, &costs, 4.0).unwrap();
        assert!(plan.step_decisions[1][0]);
        assert!(!plan.step_decisions[1][1]);
    }

    #[test]
    fn spike_cell_is_computed() {
        let mut drift = vec![vec![vec![0.0; 6]; 6]; 2];
        for s in 0..6 {
            for t in s + 1..6 {
                drift[0][s][t] = 0.05 * (t - s) as f64;
                drift[1][s][t] = 0.05 * (t - s) as f64;
            }
        }
        for s in 0..3 {
            drift[1][s][3] = 5.0;
        }
        let map = map_with(drift);
        let costs = GroupCosts::uniform(2).unwrap();
        let greedy = greedy_solve(&map, 1.5, &costs, 4.0).unwrap();
        let exact = brute_force_solve(&map, 1.5, &costs, 4.0).unwrap();
        assert!(greedy.step_decisions[3][1]);
        assert!(exact.step_decisions[3][1]);
    }

    #[test]
    fn k_values_are_gaps() {
        let d = vec![vec![true, true], vec![false, true], vec![false, false], vec![true, false]];
        assert_eq!(k_values(&d), vec![vec![0, 0], vec![1, 0], vec![2, 1], vec![0, 2]]);
    }

    #[test]
    fn even_schedule_spacing() {
        let map = zero_map(10, 1);
        let plan = even_schedule(&map, 4.0, &GroupCosts::uniform(1).unwrap()).unwrap();
        let rows: Vec<usize> = (0..10).filter(|&t| plan.step_decisions[t][0]).collect();
        assert_eq!(rows, vec![0, 2, 5, 7]);
    }

    #[test]
    fn invalid_costs() {
        assert!(GroupCosts::new(vec![0.5, 0.4], vec![1.0, 1.0]).is_err());
        assert!(GroupCosts::new(vec![1.0, 0.0], vec![1.0, 1.0]).is_err());
        assert!(GroupCosts::new(vec![0.5, 0.5], vec![1.0, -1.0]).is_err());
        let c = GroupCosts::from_layers(&[20, 20, 20]).unwrap();
        assert!((c.c[0] - 1.0 / 3.0).abs() < 1e-15);
    }

    fn arb_instance() -> impl Strategy<Value = (StabilityMap, f64, GroupCosts)> {
        (2usize..8, 1usize..4, any::<u64>(), 0.0f64..1.0, proptest::collection::vec(0.2f64..1.0, 3))
            .prop_map(|(steps, groups, seed, frac, raw)| {
                let map = random_map(steps, groups, seed);
                let sum: f64 = raw[..groups].iter().sum();
                let c: Vec<f64> = raw[..groups].iter().map(|v| v / sum).collect();
                let costs = GroupCosts::new(c, vec![1.0; groups]).unwrap();
                let budget = 1.0 + frac * (steps as f64 - 1.0);
                (map, budget, costs)
            })
    }

    /// Drift that accumulates along the trajectory, so a fresher reference
    /// is never worse: `S[g][s][t] = Σ_{s<k≤t} r_g(k)`.
    fn arb_additive_map() -> impl Strategy<Value = StabilityMap> {
        (2usize..9, 1usize..4).prop_flat_map(|(steps, groups)| {
            proptest::collection::vec(proptest::collection::vec(0.0f64..0.5, steps), groups).prop_map(
                move |rates| {
                    let drift = rates
                        .iter()
                        .map(|r| {
                            (0..steps)
                                .map(|s| (0..steps).map(|t| if t > s { r[s + 1..=t].iter().sum() } else { 0.0 }).collect())
                                .collect()
                        })
                        .collect();
                    StabilityMap::from_drift(drift, 1e-8, 1).unwrap()
                },
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn greedy_invariants((map, budget, costs) in arb_instance()) {
            let plan = greedy_solve(&map, budget, &costs, 4.0).unwrap();
            prop_assert!(plan.step_decisions[0].iter().all(|&x| x));
            prop_assert!(plan.total_cost <= budget + BUDGET_EPS);
            prop_assert_eq!(plan.total_cost, total_cost(&plan.step_decisions, &costs).unwrap());
            prop_assert!(plan.validate().is_ok());
            // maximality: no cached cell still fits
            let slack = budget - plan.total_cost;
            for row in &plan.step_decisions {
                for (g, &x) in row.iter().enumerate() {
                    prop_assert!(x || costs.c[g] > slack + BUDGET_EPS);
                }
            }
        }

        #[test]
        fn greedy_error_is_monotone_in_budget(
            map in arb_additive_map(), frac in 0.0f64..1.0, extra in 0.0f64..3.0
        ) {
            let costs = GroupCosts::uniform(map.groups).unwrap();
            let budget = 1.0 + frac * (map.steps as f64 - 1.0);
            let a = greedy_solve(&map, budget, &costs, 4.0).unwrap();
            let b = greedy_solve(&map, budget + extra, &costs, 4.0).unwrap();
            prop_assert!(b.total_error <= a.total_error + 1e-12);
        }

        #[test]
        fn weight_scaling_keeps_the_plan((map, budget, costs) in arb_instance(), k in 0.1f64..10.0) {
            let scaled = GroupCosts::new(costs.c.clone(), costs.w.iter().map(|w| w * k).collect()).unwrap();
            let a = greedy_solve(&map, budget, &costs, 4.0).unwrap();
            let b = greedy_solve(&map, budget, &scaled, 4.0).unwrap();
            prop_assert_eq!(a.step_decisions, b.step_decisions);
        }

        #[test]
        fn oracle_dominates_greedy((map, budget, costs) in arb_instance()) {
            prop_assume!(map.steps * map.groups <= 15);
            let greedy = greedy_solve(&map, budget, &costs, 4.0).unwrap();
            let exact = brute_force_solve(&map, budget, &costs, 4.0).unwrap();
            prop_assert!(exact.total_error <= greedy.total_error);
            prop_assert!(exact.total_cost <= budget + BUDGET_EPS);
        }
    }

    #[test]
    fn rescoring_follows_new_assignments() {
        // After computing (2, 0), cell (3, 0) must be scored against s = 2.
        let mut drift = vec![vec![vec![0.0; 4]; 4]];
        drift[0][0][1] = 0.1;
        drift[0][0][2] = 0.9;
        drift[0][0][3] = 0.8;
        drift[0][1][2] = 0.1;
        drift[0][1][3] = 0.1;
        drift[0][2][3] = 0.01;
        let map = map_with(drift);
        let costs = GroupCosts::uniform(1).unwrap();
        let d = vec![vec![true], vec![false], vec![true], vec![false]];
        let s = score(3, 0, &d, &map, &costs, 1.0).unwrap();
        assert!((s - 0.01).abs() < 1e-15);
        let plan = greedy_solve(&map, 2.0, &costs, 1.0).unwrap();
        assert_eq!(plan.step_decisions, d);
    }
}
