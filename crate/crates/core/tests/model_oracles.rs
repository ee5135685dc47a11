use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use layercache::jvp::AdaptiveKPolicy;
use layercache::metrics::{attribute_error, sampled_lipschitz};
use layercache::pipeline::{initial_latent, options_for, plan_for, profile, RunMode};
use layercache::profiler::{build_stability_map, DEFAULT_EPSILON};
use layercache::scheduler::GroupCosts;
use layercache::sim::{run_full, Activation, ModelConfig, SigmaSchedule, SyntheticModel};
use layercache::LatentState;

fn small_linear_model() -> SyntheticModel {
    let mut cfg = ModelConfig::heterogeneous();
    cfg.state_dim = 16;
    cfg.activation = Activation::Identity;
    SyntheticModel::new(cfg).unwrap()
}

fn basis(n: usize, i: usize) -> LatentState {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    LatentState::new(v, vec![4, 4]).unwrap()
}

/// Dense matrix of the linear part of the downstream map, one column per
/// basis vector.
fn dense_downstream(model: &SyntheticModel, first: usize, sigma: f64) -> DMatrix<f64> {
    let n = model.state_dim();
    let zero = LatentState::zeros(&[4, 4]);
    let offset = model.forward_from(first, &zero, sigma).unwrap();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        let col = model.forward_from(first, &basis(n, i), sigma).unwrap().sub(&offset).unwrap();
        for (r, v) in col.data().iter().enumerate() {
            m[(r, i)] = *v;
        }
    }
    m
}

#[test]
fn sampled_lipschitz_matches_operator_norm_of_linear_model() {
    let model = small_linear_model();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for first in 0..=model.num_groups() {
        for sigma in [0.9, 0.66, 0.2] {
            let m = dense_downstream(&model, first, sigma);
            let svd = m.clone().svd(false, false);
            let top = svd.singular_values.max();
            let at = initial_latent(&[4, 4], 3);
            let f = |x: &LatentState| model.forward_from(first, x, sigma);
            let est = sampled_lipschitz(f, &at, 0.01, 16, &mut rng).unwrap();
            assert!(est <= top * (1.0 + 1e-9), "first {first}, sigma {sigma}: {est} > {top}");
            // Orthogonal mixing makes every singular value equal.
            assert!((est - top).abs() <= 1e-9 * top.max(1.0), "first {first}: {est} vs {top}");
            assert!((svd.singular_values.min() - top).abs() <= 1e-9 * top.max(1.0));
        }
    }
}

#[test]
fn downstream_transpose_matches_dense_transpose() {
    let model = small_linear_model();
    for first in 0..=model.num_groups() {
        let m = dense_downstream(&model, first, 0.4);
        for i in 0..model.state_dim() {
            let row = model.linear_downstream_transpose(first, &basis(16, i), 0.4).unwrap();
            for (j, v) in row.data().iter().enumerate() {
                assert!((v - m[(i, j)]).abs() <= 1e-12, "first {first} ({i}, {j})");
            }
        }
    }
}

#[test]
fn default_model_profile_shows_three_regimes() {
    let model = SyntheticModel::new(ModelConfig::heterogeneous()).unwrap();
    let schedule = SigmaSchedule::linear(50).unwrap();
    let map = profile(&model, &schedule, &[0, 1, 2]).unwrap().groups;
    let s = &map.summary;
    assert!(s[0].mean < s[1].mean && s[0].mean < s[2].mean, "{s:?}");
    assert!(s[2].max > s[0].max && s[2].max > s[1].max, "{s:?}");

    let deep: Vec<f64> = (1..50).map(|t| map.delta_at(2, t)).collect();
    let mut sorted = deep.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    assert!(map.delta_at(2, 17) > 3.0 * median, "{} vs median {median}", map.delta_at(2, 17));
}

#[test]
fn profiling_is_reproducible_from_traces() {
    let model = SyntheticModel::new(ModelConfig::heterogeneous()).unwrap();
    let schedule = SigmaSchedule::linear(20).unwrap();
    let shape = model.image_shape();
    let traces: Vec<_> = [4, 5]
        .iter()
        .map(|&s| run_full(&model, &schedule, &initial_latent(&shape, s)).unwrap().trace)
        .collect();
    let a = build_stability_map(&traces, DEFAULT_EPSILON).unwrap();
    let b = profile(&model, &schedule, &[4, 5]).unwrap().groups;
    assert_eq!(a.fingerprint(), b.fingerprint());
    assert_eq!(a.runs, 2);
}

#[test]
fn always_computed_deep_group_takes_no_blame() {
    let model = SyntheticModel::new(ModelConfig::heterogeneous()).unwrap();
    let schedule = SigmaSchedule::linear(50).unwrap();
    let profiles = profile(&model, &schedule, &[0, 1, 2]).unwrap();
    let costs = GroupCosts::from_layers(&model.layer_counts()).unwrap();
    let mut plan = plan_for(RunMode::LayerCache, &profiles, 20.0, &costs, 4.0)
        .unwrap()
        .step_decisions;
    for row in plan.iter_mut() {
        row[2] = true;
    }
    let opts = options_for(RunMode::LayerCache, &profiles, AdaptiveKPolicy::default());
    let x0 = initial_latent(&model.image_shape(), 42);
    let attr = attribute_error(&model, &schedule, &x0, &plan, &opts).unwrap();
    assert!(attr.defined);
    assert_eq!(attr.shares[2], 0.0);
    assert!((attr.shares.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}
