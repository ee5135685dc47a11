//! Synthetic 3-group map whose change-rate summaries equal a measured
//! profile of a 60-layer transformer split into three 20-layer groups.
//!
//! Each group's change-rate series is shaped from a base curve plus a
//! peak pattern, rescaled to the target mean, standard deviation and
//! maximum, and then realized as an actual trajectory in `R^8` so that the
//! pairwise drifts are those of a real sequence of states.

use std::f64::consts::TAU;

use super::{build_stability_map, StabilityMap, DEFAULT_EPSILON};
use crate::latent::LatentState;
use crate::sim::GroupTrace;

/// `(mean, std, max)` of the change rate of the shallow, middle and deep
/// groups over a 50-step run.
pub const TARGET_SUMMARY: [(f64, f64, f64); 3] = [
    (0.1087, 0.0781, 0.3953),
    (0.1815, 0.0935, 0.4387),
    (0.1091, 0.1434, 0.6662),
];

const STEPS: usize = 50;
const DIM: usize = 8;

fn mean_std(z: &[f64]) -> (f64, f64) {
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Scale `pattern` until the peak's z-score matches the target, then map
/// affinely onto the exact mean and standard deviation.
fn fit_series(base: &[f64], pattern: &[f64], (mu, sd, max): (f64, f64, f64)) -> Vec<f64> {
    let peak = pattern
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > pattern[best] { i } else { best });
    let target = (max - mu) / sd;
    let shaped = |p: f64| -> Vec<f64> { base.iter().zip(pattern).map(|(b, q)| b + p * q).collect() };
    let zscore = |p: f64| {
        let z = shaped(p);
        let (m, s) = mean_std(&z);
        (z[peak] - m) / s
    };
    let (mut lo, mut hi) = (0.0, 1e4);
    assert!(zscore(lo) < target && target < zscore(hi));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if zscore(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let z = shaped(0.5 * (lo + hi));
    let (m, s) = mean_std(&z);
    z.iter().map(|v| mu + sd * (v - m) / s).collect()
}

fn unit(i: usize) -> [f64; DIM] {
    let mut e = [0.0; DIM];
    e[i] = 1.0;
    e
}

/// States `h_0 = e_0, h_k = h_{k−1} + λ_k u_k` with `λ_k` chosen so the
/// change rate at step `k` is exactly `delta[k − 1]`.
fn realize(delta: &[f64], direction: impl Fn(usize) -> [f64; DIM]) -> Vec<[f64; DIM]> {
    let mut h = unit(0);
    let mut states = vec![h];
    for (i, &d) in delta.iter().enumerate() {
        let u = direction(i + 1);
        let r: f64 = h.iter().map(|v| v * v).sum();
        let p: f64 = h.iter().zip(&u).map(|(a, b)| a * b).sum();
        let d2 = d * d;
        let lambda = (2.0 * d2 * p + (4.0 * d2 * d2 * p * p + 4.0 * (1.0 - d2) * d2 * r).sqrt())
            / (2.0 * (1.0 - d2));
        for (hv, uv) in h.iter_mut().zip(&u) {
            *hv += lambda * uv;
        }
        states.push(h);
    }
    states
}

fn target_series() -> [Vec<f64>; 3] {
    let n = STEPS - 1;
    let step = |i: usize| (i + 1) as f64;

    let mut base0: Vec<f64> = (0..n).map(|i| (-(step(i) - 1.0) / 8.0).exp()).collect();
    base0[0] = 0.0;
    let mut pat0 = vec![0.0; n];
    pat0[0] = 1.0;

    let base1: Vec<f64> = (0..n)
        .map(|i| {
            let t = step(i);
            1.0 + 0.6 * (TAU * t / 6.0).sin() + 0.8 * (-(t - 1.0) / 15.0).exp()
        })
        .collect();
    let mut pat1 = vec![0.0; n];
    pat1[2] = 1.0;

    let base2: Vec<f64> = (0..n).map(|i| 1.0 + 3.0 * (-(step(i) - 1.0) / 5.0).exp()).collect();
    let mut pat2 = vec![0.0; n];
    pat2[16] = 1.0;
    pat2[32] = 0.75;

    [
        fit_series(&base0, &pat0, TARGET_SUMMARY[0]),
        fit_series(&base1, &pat1, TARGET_SUMMARY[1]),
        fit_series(&base2, &pat2, TARGET_SUMMARY[2]),
    ]
}

/// Stability map (T = 50, G = 3) with the target per-group summaries:
/// a smooth shallow group, an oscillating middle group and a deep group
/// with spikes at steps 17 and 33.
pub fn reference_statistics_map() -> StabilityMap {
    let [d0, d1, d2] = target_series();
    let w = TAU / 4.0;
    let groups = [
        realize(&d0, |k| {
            let mut e = unit(1);
            if k % 2 == 0 {
                e[1] = -1.0;
            }
            e
        }),
        realize(&d1, |k| {
            let mut e = [0.0; DIM];
            e[2] = (w * k as f64).cos();
            e[3] = (w * k as f64).sin();
            e
        }),
        realize(&d2, |_| unit(4)),
    ];
    let state = |v: &[f64; DIM]| LatentState::from_vec(v.to_vec()).expect("finite fixture state");
    let trace = GroupTrace {
        sigmas: (0..STEPS).map(|t| 1.0 - t as f64 / STEPS as f64).collect(),
        hidden: (0..STEPS)
            .map(|t| groups.iter().map(|g| state(&g[t])).collect())
            .collect(),
        velocity: (0..STEPS).map(|t| state(&groups[2][t])).collect(),
    };
    let mut map = build_stability_map(&[trace], DEFAULT_EPSILON).expect("fixture trace is consistent");
    map.meta = Some(serde_json::json!({ "source": "reference-statistics fixture" }));
    map
}
