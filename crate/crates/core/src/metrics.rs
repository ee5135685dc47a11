//! Image-quality metrics against the uncached baseline, per-group error
//! attribution and the error-propagation diagnostic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::LatentState;
use crate::sim::{
    run_cached, run_cached_observed, run_full, CacheObserver, CacheOptions, EstimationMode,
    SigmaSchedule, SyntheticModel,
};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

/// `max − min` of the baseline image.
pub fn default_data_range(baseline: &LatentState) -> f64 {
    let (lo, hi) = baseline
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    hi - lo
}

fn resolve_range(baseline: &LatentState, data_range: Option<f64>) -> Result<f64> {
    let range = data_range.unwrap_or_else(|| default_data_range(baseline));
    if !(range.is_finite() && range > 0.0) {
        return Err(Error::config(format!("data range must be positive, got {range}")));
    }
    Ok(range)
}

/// `10 · log10(range² / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(baseline: &LatentState, test: &LatentState, data_range: Option<f64>) -> Result<f64> {
    baseline.ensure_same_shape(test)?;
    let range = resolve_range(baseline, data_range)?;
    let mse = baseline
        .data()
        .iter()
        .zip(test.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / baseline.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (range * range / mse).log10()).min(PSNR_CAP_DB))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimOptions {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    /// Defaults to the baseline's range.
    pub data_range: Option<f64>,
}

impl Default for SsimOptions {
    fn default() -> Self {
        Self {
            window: 7,
            k1: 0.01,
            k2: 0.03,
            data_range: None,
        }
    }
}

/// Mean structural similarity over all fully contained square windows with
/// uniform weights and population statistics.
pub fn ssim(baseline: &LatentState, test: &LatentState, options: &SsimOptions) -> Result<f64> {
    baseline.ensure_same_shape(test)?;
    let (rows, cols) = match baseline.shape() {
        [r, c] => (*r, *c),
        other => return Err(Error::config(format!("SSIM needs a 2-D image, got shape {other:?}"))),
    };
    let w = options.window;
    if w < 3 || w.is_multiple_of(2) {
        return Err(Error::config(format!("SSIM window must be odd and >= 3, got {w}")));
    }
    if rows < w || cols < w {
        return Err(Error::config(format!(
            "image {rows}x{cols} is smaller than the {w}x{w} window"
        )));
    }
    let range = resolve_range(baseline, options.data_range)?;
    let c1 = (options.k1 * range).powi(2);
    let c2 = (options.k2 * range).powi(2);
    let (a, b) = (baseline.data(), test.data());
    let n = (w * w) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=rows - w {
        for c0 in 0..=cols - w {
            let cells = || (r0..r0 + w).flat_map(move |r| (c0..c0 + w).map(move |c| r * cols + c));
            let (mut sa, mut sb) = (0.0, 0.0);
            for i in cells() {
                sa += a[i];
                sb += b[i];
            }
            let (ma, mb) = (sa / n, sb / n);
            let (mut vaa, mut vbb, mut vab) = (0.0, 0.0, 0.0);
            for i in cells() {
                let (da, db) = (a[i] - ma, b[i] - mb);
                vaa += da * da;
                vbb += db * db;
                vab += da * db;
            }
            let (vaa, vbb, vab) = (vaa / n, vbb / n, vab / n);
            total += ((2.0 * ma * mb + c1) * (2.0 * vab + c2))
                / ((ma * ma + mb * mb + c1) * (vaa + vbb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Per-group share of the final-latent error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub shares: Vec<f64>,
    /// `‖x̂_g − x_full‖` for the plan restricted to each group's cached cells.
    pub distances: Vec<f64>,
    /// False when the plan caches nothing or caching changed nothing.
    pub defined: bool,
}

/// Attribute final-latent error to groups by caching one group at a time.
pub fn attribute_error(
    model: &SyntheticModel,
    schedule: &SigmaSchedule,
    x0: &LatentState,
    plan: &[Vec<bool>],
    options: &CacheOptions,
) -> Result<Attribution> {
    let groups = model.num_groups();
    let reference = run_full(model, schedule, x0)?;
    let layer = CacheOptions {
        mode: EstimationMode::LayerCache,
        ..*options
    };
    let mut distances = vec![0.0; groups];
    for (g, dist) in distances.iter_mut().enumerate() {
        if plan.iter().all(|row| row.get(g).copied().unwrap_or(true)) {
            continue;
        }
        let variant: Vec<Vec<bool>> = plan
            .iter()
            .map(|row| row.iter().enumerate().map(|(j, &d)| d || j != g).collect())
            .collect();
        let run = run_cached(model, schedule, x0, &variant, &layer)?;
        *dist = run.final_state.distance(reference.final_state())?;
    }
    let total: f64 = distances.iter().sum();
    let defined = total > 0.0;
    let shares = if defined {
        distances.iter().map(|d| d / total).collect()
    } else {
        vec![0.0; groups]
    };
    Ok(Attribution {
        shares,
        distances,
        defined,
    })
}

/// Quality of one cached run against its uncached baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub psnr_db: f64,
    pub ssim: f64,
    /// Not computed; kept so the schema lines up with perceptual metrics.
    pub lpips: Option<f64>,
    pub per_group_attribution: Vec<f64>,
    pub modeled_speedup: f64,
}

impl QualityReport {
    pub fn csv_header(groups: usize) -> String {
        let mut cols = vec!["budget".to_string(), "psnr_db".into(), "ssim".into(), "speedup".into()];
        cols.extend((0..groups).map(|g| format!("attr_g{g}")));
        cols.join(",")
    }

    pub fn csv_row(&self, budget: f64) -> String {
        let mut cols = vec![
            budget.to_string(),
            self.psnr_db.to_string(),
            self.ssim.to_string(),
            self.modeled_speedup.to_string(),
        ];
        cols.extend(self.per_group_attribution.iter().map(|a| a.to_string()));
        cols.join(",")
    }
}

/// Largest `‖f(x + r·u) − f(x)‖ / r` over `samples` random unit directions.
pub fn sampled_lipschitz(
    f: impl Fn(&LatentState) -> Result<LatentState>,
    at: &LatentState,
    radius: f64,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if !(radius > 0.0) {
        return Err(Error::config("perturbation radius must be positive"));
    }
    let base = f(at)?;
    let mut best: f64 = 0.0;
    for _ in 0..samples {
        let dir: Vec<f64> = (0..at.len()).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dir = LatentState::new(dir, at.shape().to_vec())?;
        let moved = f(&at.axpy(radius / norm, &dir)?)?;
        best = best.max(moved.distance(&base)? / radius);
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDiagnostic {
    pub step: usize,
    pub group: usize,
    /// `‖ĥ^g − f_g(ĥ^{g−1})‖`.
    pub residual: f64,
    /// Sampled Lipschitz factor of everything downstream of the group.
    pub lipschitz: f64,
}

/// Outcome of comparing the final-latent error with its propagated bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionRecord {
    /// `‖x̂_T − x_T‖`.
    pub lhs: f64,
    /// Per-step residuals amplified downstream and propagated through the
    /// remaining Euler steps.
    pub rhs: f64,
    pub holds: bool,
    pub safety: f64,
    pub cells: Vec<CellDiagnostic>,
    /// Sampled Lipschitz factor of the whole network at each step.
    pub step_lipschitz: Vec<f64>,
}

pub const DECOMPOSITION_SAMPLES: usize = 32;

struct DecompositionObserver<'a> {
    model: &'a SyntheticModel,
    reference: &'a [LatentState],
    samples: usize,
    rng: ChaCha8Rng,
    cells: Vec<CellDiagnostic>,
    step_lipschitz: Vec<f64>,
}

impl CacheObserver for DecompositionObserver<'_> {
    fn on_group(
        &mut self,
        step: usize,
        group: usize,
        sigma: f64,
        input: &LatentState,
        output: &LatentState,
        estimated: bool,
    ) -> Result<()> {
        if !estimated {
            return Ok(());
        }
        let exact = self.model.group_forward(group, input, sigma)?;
        let residual = output.distance(&exact)?;
        let lipschitz = if residual > 0.0 {
            let model = self.model;
            sampled_lipschitz(
                |y| model.forward_from(group + 1, y, sigma),
                &exact,
                residual,
                self.samples,
                &mut self.rng,
            )?
        } else {
            0.0
        };
        self.cells.push(CellDiagnostic {
            step,
            group,
            residual,
            lipschitz,
        });
        Ok(())
    }

    fn on_step(&mut self, step: usize, sigma: f64, x: &LatentState) -> Result<()> {
        let drift = x.distance(&self.reference[step])?;
        let radius = if drift > 0.0 {
            drift
        } else {
            1e-6 * x.norm().max(1.0)
        };
        let model = self.model;
        let l = sampled_lipschitz(
            |y| Ok(model.forward(y, sigma, false)?.velocity),
            x,
            radius,
            self.samples,
            &mut self.rng,
        )?;
        self.step_lipschitz.push(l);
        Ok(())
    }
}

/// Check `‖x̂_T − x_T‖` against
/// `Σ_t |Δσ_t| · Π_{s>t}(1 + |Δσ_s| · k · L_x(s)) · Σ_g k · L_g(t) · ‖ε^g_t‖`
/// where `ε^g_t` is the extrapolation residual of an estimated cell, `L_g`
/// the sampled Lipschitz factor downstream of it, `L_x` that of the whole
/// network and `k` the safety factor.
#[allow(clippy::too_many_arguments)]
pub fn decomposition_check(
    model: &SyntheticModel,
    schedule: &SigmaSchedule,
    x0: &LatentState,
    plan: &[Vec<bool>],
    options: &CacheOptions,
    safety: f64,
    seed: u64,
) -> Result<DecompositionRecord> {
    let reference = run_full(model, schedule, x0)?;
    let layer = CacheOptions {
        mode: EstimationMode::LayerCache,
        ..*options
    };
    let mut observer = DecompositionObserver {
        model,
        reference: &reference.trajectory,
        samples: DECOMPOSITION_SAMPLES,
        rng: ChaCha8Rng::seed_from_u64(seed),
        cells: Vec::new(),
        step_lipschitz: Vec::new(),
    };
    let run = run_cached_observed(model, schedule, x0, plan, &layer, &mut observer)?;
    let lhs = run.final_state.distance(reference.final_state())?;

    let steps = schedule.steps();
    let mut injected = vec![0.0; steps];
    for cell in &observer.cells {
        injected[cell.step] += safety * cell.lipschitz * cell.residual;
    }
    // Backward accumulation of the growth factors.
    let mut rhs = 0.0;
    let mut growth = 1.0;
    for t in (0..steps).rev() {
        let h = schedule.step_size(t).abs();
        rhs += h * growth * injected[t];
        growth *= 1.0 + h * safety * observer.step_lipschitz[t];
    }
    let holds = lhs <= rhs * (1.0 + 1e-9) + 1e-12;
    Ok(DecompositionRecord {
        lhs,
        rhs,
        holds,
        safety,
        cells: observer.cells,
        step_lipschitz: observer.step_lipschitz,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jvp::AdaptiveKPolicy;
    use crate::sim::{Activation, ModelConfig};
    use proptest::prelude::*;

    fn img(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> LatentState {
        let data = (0..rows * cols).map(|k| f(k / cols, k % cols)).collect();
        LatentState::new(data, vec![rows, cols]).unwrap()
    }

    fn golden_pair() -> (LatentState, LatentState) {
        let a = img(8, 8, |i, j| (0.7 * i as f64 + 1.3 * j as f64).sin());
        let b = img(8, 8, |i, j| {
            (0.7 * i as f64 + 1.3 * j as f64).sin() + 0.1 * ((i * j) as f64).cos() - 0.05 * i as f64 / 8.0
        });
        (a, b)
    }

    /// Textbook SSIM with moments from raw sums: `E[x²] − μ²`.
    fn oracle_ssim(a: &LatentState, b: &LatentState, w: usize, range: f64) -> f64 {
        let cols = a.shape()[1];
        let rows = a.shape()[0];
        let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
        let mut vals = Vec::new();
        for r in 0..=rows - w {
            for c in 0..=cols - w {
                let px: Vec<(f64, f64)> = (0..w * w)
                    .map(|k| {
                        let i = (r + k / w) * cols + c + k % w;
                        (a.data()[i], b.data()[i])
                    })
                    .collect();
                let n = px.len() as f64;
                let mx = px.iter().map(|p| p.0).sum::<f64>() / n;
                let my = px.iter().map(|p| p.1).sum::<f64>() / n;
                let vx = px.iter().map(|p| p.0 * p.0).sum::<f64>() / n - mx * mx;
                let vy = px.iter().map(|p| p.1 * p.1).sum::<f64>() / n - my * my;
                let cxy = px.iter().map(|p| p.0 * p.1).sum::<f64>() / n - mx * my;
                vals.push((2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)));
            }
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    #[test]
    fn psnr_examples() {
        let a = img(4, 4, |i, j| (i * 4 + j) as f64 / 15.0);
        assert_eq!(psnr(&a, &a, Some(1.0)).unwrap(), PSNR_CAP_DB);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, Some(1.0)).unwrap() - 20.0).abs() < 1e-9);
        let c = a.map(|v| v + 0.05);
        let gain = psnr(&a, &c, Some(1.0)).unwrap() - psnr(&a, &b, Some(1.0)).unwrap();
        assert!((gain - 10.0 * 4f64.log10()).abs() < 1e-9);
        assert!(psnr(&a, &b, Some(0.0)).is_err());
        assert!(psnr(&a, &LatentState::zeros(&[16]), Some(1.0)).is_err());
    }

    #[test]
    fn ssim_golden_value() {
        let (a, b) = golden_pair();
        let opts = SsimOptions {
            data_range: Some(2.0),
            ..SsimOptions::default()
        };
        let ours = ssim(&a, &b, &opts).unwrap();
        assert!((ours - oracle_ssim(&a, &b, 7, 2.0)).abs() < 1e-6);
        // scikit-image, uniform 7x7 window, population covariance
        assert!((ours - 0.9430691173331595).abs() < 1e-6);
    }

    #[test]
    fn ssim_identity_and_anticorrelation() {
        let (a, _) = golden_pair();
        assert!((ssim(&a, &a, &SsimOptions::default()).unwrap() - 1.0).abs() < 1e-12);
        // every 7x7 window of a period-7 pattern has zero mean
        let tau = std::f64::consts::TAU;
        let centred = img(9, 9, |i, j| (tau * i as f64 / 7.0).sin() + (tau * j as f64 / 7.0).cos());
        let neg = centred.map(|v| -v);
        assert!(ssim(&centred, &neg, &SsimOptions::default()).unwrap() < 0.0);
    }

    #[test]
    fn ssim_rejects_bad_inputs() {
        let small = img(5, 5, |i, j| (i + j) as f64);
        assert!(ssim(&small, &small, &SsimOptions::default()).is_err());
        let flat = LatentState::from_vec(vec![1.0, 2.0, 3.0]).unwrap();
        assert!(ssim(&flat, &flat, &SsimOptions::default()).is_err());
        let (a, b) = golden_pair();
        let even = SsimOptions {
            window: 4,
            ..SsimOptions::default()
        };
        assert!(ssim(&a, &b, &even).is_err());
    }

    proptest! {
        #[test]
        fn ssim_symmetric_and_bounded(
            xs in proptest::collection::vec(-2.0f64..2.0, 100),
            ys in proptest::collection::vec(-2.0f64..2.0, 100),
        ) {
            let a = LatentState::new(xs, vec![10, 10]).unwrap();
            let b = LatentState::new(ys, vec![10, 10]).unwrap();
            let opts = SsimOptions { data_range: Some(4.0), ..SsimOptions::default() };
            let ab = ssim(&a, &b, &opts).unwrap();
            let ba = ssim(&b, &a, &opts).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn psnr_translation_invariant(
            xs in proptest::collection::vec(-2.0f64..2.0, 16),
            ys in proptest::collection::vec(-2.0f64..2.0, 16),
            shift in -10.0f64..10.0,
        ) {
            let a = LatentState::from_vec(xs).unwrap();
            let b = LatentState::from_vec(ys).unwrap();
            let p = psnr(&a, &b, Some(4.0)).unwrap();
            let q = psnr(&a.map(|v| v + shift), &b.map(|v| v + shift), Some(4.0)).unwrap();
            prop_assert!((p - q).abs() < 1e-6);
        }
    }

    fn model(dim: usize, activation: Activation) -> SyntheticModel {
        let mut c = ModelConfig::heterogeneous();
        c.state_dim = dim;
        c.activation = activation;
        SyntheticModel::new(c).unwrap()
    }

    fn x0(dim: usize, seed: u64) -> LatentState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentState::from_vec((0..dim).map(|_| rand::Rng::sample(&mut rng, StandardNormal)).collect()).unwrap()
    }

    fn opts() -> CacheOptions<'static> {
        CacheOptions::new(EstimationMode::LayerCache, AdaptiveKPolicy::default(), None)
    }

    #[test]
    fn attribution_cases() {
        let m = model(64, Activation::Tanh);
        let sched = SigmaSchedule::linear(12).unwrap();
        let x = x0(64, 1);
        let only_g0: Vec<Vec<bool>> = (0..12).map(|t| vec![t % 3 == 0, true, true]).collect();
        let a = attribute_error(&m, &sched, &x, &only_g0, &opts()).unwrap();
        assert!(a.defined);
        assert_eq!(a.shares, vec![1.0, 0.0, 0.0]);

        let all = vec![vec![true; 3]; 12];
        let a = attribute_error(&m, &sched, &x, &all, &opts()).unwrap();
        assert!(!a.defined);
        assert_eq!(a.shares, vec![0.0; 3]);

        let mixed: Vec<Vec<bool>> = (0..12).map(|t| vec![t % 3 == 0, t % 2 == 0, true]).collect();
        let a = attribute_error(&m, &sched, &x, &mixed, &opts()).unwrap();
        assert!((a.shares.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(a.shares[2], 0.0);
    }

    #[test]
    fn all_compute_plan_has_zero_decomposition() {
        let m = model(32, Activation::Tanh);
        let sched = SigmaSchedule::linear(8).unwrap();
        let rec = decomposition_check(&m, &sched, &x0(32, 2), &vec![vec![true; 3]; 8], &opts(), 1.0, 0).unwrap();
        assert_eq!((rec.lhs, rec.rhs), (0.0, 0.0));
        assert!(rec.holds);
    }

    #[test]
    fn linear_model_bound_holds() {
        let m = model(32, Activation::Identity);
        let sched = SigmaSchedule::linear(16).unwrap();
        let plan: Vec<Vec<bool>> = (0..16).map(|t| vec![t % 4 == 0, t % 2 == 0, t % 3 == 0]).collect();
        let rec = decomposition_check(&m, &sched, &x0(32, 3), &plan, &opts(), 1.0, 7).unwrap();
        assert!(rec.lhs > 0.0);
        assert!(rec.holds, "{} > {}", rec.lhs, rec.rhs);
    }

    #[test]
    fn report_csv_layout() {
        let r = QualityReport {
            psnr_db: 30.5,
            ssim: 0.9,
            lpips: None,
            per_group_attribution: vec![0.25, 0.75],
            modeled_speedup: 2.0,
        };
        assert_eq!(QualityReport::csv_header(2), "budget,psnr_db,ssim,speedup,attr_g0,attr_g1");
        assert_eq!(r.csv_row(25.0), "25,30.5,0.9,2,0.25,0.75");
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["lpips"].is_null());
    }
}
