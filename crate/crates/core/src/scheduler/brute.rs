//! Exhaustive solver used as an exact reference on small instances.

use super::{check_solver_inputs, Schedule, ScheduleMeta, BUDGET_EPS};
use super::GroupCosts;
use crate::error::{Error, Result};
use crate::profiler::StabilityMap;

/// Largest `T · G` accepted by [`brute_force_solve`].
pub const BRUTE_FORCE_CELL_LIMIT: usize = 24;

/// Minimum-error plan within the budget by enumerating every decision
/// matrix. On equal error the plan that computes earlier cells wins.
pub fn brute_force_solve(map: &StabilityMap, budget: f64, costs: &GroupCosts, gamma: f64) -> Result<Schedule> {
    check_solver_inputs(map, budget, costs, gamma)?;
    let (steps, groups) = (map.steps, map.groups);
    if steps * groups > BRUTE_FORCE_CELL_LIMIT {
        return Err(Error::InstanceTooLarge {
            cells: steps * groups,
            limit: BRUTE_FORCE_CELL_LIMIT,
        });
    }
    let free = (steps - 1) * groups;
    let bit = |t: usize, g: usize| 1u32 << (free - 1 - ((t - 1) * groups + g));
    let base_cost = costs.step_cost();

    let mut best: Option<(f64, u32)> = None;
    let mut last = vec![0usize; groups];
    for mask in 0u32..(1u32 << free) {
        let mut cost = base_cost;
        for t in 1..steps {
            for g in 0..groups {
                if mask & bit(t, g) != 0 {
                    cost += costs.c[g];
                }
            }
        }
        if cost > budget + BUDGET_EPS {
            continue;
        }
        last.fill(0);
        let mut error = 0.0;
        for t in 1..steps {
            for g in 0..groups {
                if mask & bit(t, g) != 0 {
                    last[g] = t;
                } else {
                    error += costs.w[g] * map.drift(g, last[g], t);
                }
            }
        }
        if best.is_none_or(|(e, _)| error <= e) {
            best = Some((error, mask));
        }
    }
    let (_, mask) = best.expect("the first-step-only plan is always feasible");
    let d = (0..steps)
        .map(|t| (0..groups).map(|g| t == 0 || mask & bit(t, g) != 0).collect())
        .collect();
    let mut schedule = Schedule::from_decisions(d, map, costs)?;
    schedule.meta = Some(ScheduleMeta {
        budget,
        gamma,
        fingerprint: map.fingerprint(),
    });
    Ok(schedule)
}
