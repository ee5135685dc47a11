use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use layercache::metrics::{attribute_error, Attribution, QualityReport};
use layercache::pipeline::{
    budget_sweep, evaluate, initial_latent, options_for, plan_for, profile as profile_runs, Profiles,
    RunMode, SweepSetup,
};
use layercache::profiler::{reference_statistics_map, StabilityMap};
use layercache::scheduler::{greedy_solve, meta_path, GroupCosts, Schedule};
use layercache::Error;

use crate::config::{Resolved, RunConfig};

/// Optional input files shared by `run` and `attribute`.
pub struct Inputs {
    schedule: Option<PathBuf>,
    map: Option<PathBuf>,
    velocity_map: Option<PathBuf>,
}

impl Inputs {
    pub fn new(schedule: Option<PathBuf>, map: Option<PathBuf>, velocity_map: Option<PathBuf>) -> Self {
        Self {
            schedule,
            map,
            velocity_map,
        }
    }
}

/// Whole-network map written alongside a per-group map.
pub fn velocity_path(map: &Path) -> PathBuf {
    map.with_extension("velocity.json")
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_file(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn percent(rates: &[f64]) -> String {
    rates
        .iter()
        .enumerate()
        .map(|(g, r)| format!("g{g} {:.1}%", 100.0 * r))
        .collect::<Vec<_>>()
        .join(", ")
}

fn check_map(map: &StabilityMap, steps: usize, groups: usize, what: &str) -> Result<()> {
    if map.steps != steps || map.groups != groups {
        return Err(Error::Config(format!(
            "{what} covers {} steps x {} groups, expected {steps} x {groups}",
            map.steps, map.groups
        ))
        .into());
    }
    Ok(())
}

pub fn profile(cfg: RunConfig, out: Option<PathBuf>, fixture: bool) -> Result<()> {
    let out = out.unwrap_or_else(|| cfg.output_dir.join("stability_map.json"));
    let map = if fixture {
        let map = reference_statistics_map();
        map.save(&out)?;
        map
    } else {
        let res = Resolved::new(cfg)?;
        let mut profiles = profile_runs(&res.model, &res.schedule, &res.config.profile_seeds)?;
        profiles.groups.meta = Some(res.meta());
        profiles.velocity.meta = Some(res.meta());
        write_file(&out, &(profiles.groups.to_json()? + "\n"))?;
        let side = velocity_path(&out);
        write_file(&side, &(profiles.velocity.to_json()? + "\n"))?;
        StabilityMap::load(&side)?;
        profiles.groups
    };
    StabilityMap::load(&out)?;
    println!("stability map: {} steps, {} groups, {} run(s)", map.steps, map.groups, map.runs);
    for (g, s) in map.summary.iter().enumerate() {
        println!("- g{g}: mean {:.4}, std {:.4}, max {:.4}", s.mean, s.std, s.max);
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn schedule(cfg: RunConfig, has_config: bool, map_path: &Path, out: Option<PathBuf>) -> Result<()> {
    let map = StabilityMap::load(map_path)?;
    let costs = if has_config || cfg.model.is_some() {
        let res = Resolved::new(cfg.clone())?;
        check_map(&map, res.config.steps, res.model.num_groups(), "stability map")?;
        res.costs
    } else {
        GroupCosts::uniform(map.groups)?
    };
    let plan = greedy_solve(&map, cfg.budget, &costs, cfg.gamma)?;
    let out = out.unwrap_or_else(|| cfg.output_dir.join("schedule.json"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    plan.save(&out)?;
    let reread = Schedule::load(&out)?;
    anyhow::ensure!(reread == plan, "schedule at {} did not read back identically", out.display());

    println!("cache rates: {}", percent(&plan.cache_rates()));
    println!(
        "total cost {:.4} of budget {}, modeled speedup {:.3}x, modeled error {:.6}",
        plan.total_cost,
        cfg.budget,
        plan.modeled_speedup(),
        plan.total_error
    );
    println!("wrote {} and {}", out.display(), meta_path(&out).display());
    Ok(())
}

fn load_profiles(res: &Resolved, inputs: &Inputs) -> Result<Profiles> {
    let Some(map_path) = &inputs.map else {
        return Ok(profile_runs(&res.model, &res.schedule, &res.config.profile_seeds)?);
    };
    let groups = StabilityMap::load(map_path)?;
    let velocity_path = inputs.velocity_map.clone().unwrap_or_else(|| velocity_path(map_path));
    if !velocity_path.exists() {
        return Err(Error::Config(format!(
            "whole-network map {} not found; pass --velocity-map",
            velocity_path.display()
        ))
        .into());
    }
    let velocity = StabilityMap::load(&velocity_path)?;
    check_map(&groups, res.config.steps, res.model.num_groups(), "stability map")?;
    check_map(&velocity, res.config.steps, 1, "whole-network map")?;
    Ok(Profiles { groups, velocity })
}

/// Plan from `--schedule` or solved for the configured mode and budget.
fn load_plan(res: &Resolved, inputs: &Inputs, profiles: &Profiles) -> Result<Schedule> {
    let cfg = &res.config;
    let plan = match &inputs.schedule {
        Some(path) => Schedule::load(path).with_context(|| format!("loading schedule {}", path.display()))?,
        None => plan_for(cfg.mode, profiles, cfg.budget, &res.costs, cfg.gamma)?,
    };
    if plan.steps() != cfg.steps || plan.groups() != res.model.num_groups() {
        return Err(Error::Config(format!(
            "schedule covers {} steps x {} groups, expected {} x {}",
            plan.steps(),
            plan.groups(),
            cfg.steps,
            res.model.num_groups()
        ))
        .into());
    }
    Ok(plan)
}

fn mean_report(reports: &[QualityReport]) -> QualityReport {
    layercache::pipeline::SweepCell {
        budget: 0.0,
        mode: RunMode::Full,
        reports: reports.to_vec(),
    }
    .mean_report()
}

#[derive(Serialize)]
struct RunReport {
    meta: serde_json::Value,
    mode: RunMode,
    budget: f64,
    total_cost: f64,
    cache_rates: Vec<f64>,
    eval_seeds: Vec<u64>,
    reports: Vec<QualityReport>,
    mean: QualityReport,
}

pub fn run(cfg: RunConfig, inputs: &Inputs, out: Option<PathBuf>) -> Result<()> {
    let res = Resolved::new(cfg)?;
    let profiles = load_profiles(&res, inputs)?;
    let plan = load_plan(&res, inputs, &profiles)?;
    let options = options_for(res.config.mode, &profiles, res.config.policy);
    let shape = res.model.image_shape();
    let reports = res
        .config
        .eval_seeds
        .iter()
        .map(|&seed| {
            let x0 = initial_latent(&shape, seed);
            evaluate(&res.model, &res.schedule, &x0, &plan, &options, true)
        })
        .collect::<layercache::Result<Vec<_>>>()?;
    let mean = mean_report(&reports);
    let report = RunReport {
        meta: res.meta(),
        mode: res.config.mode,
        budget: res.config.budget,
        total_cost: plan.total_cost,
        cache_rates: plan.cache_rates(),
        eval_seeds: res.config.eval_seeds.clone(),
        reports,
        mean: mean.clone(),
    };
    let out = out.unwrap_or_else(|| res.config.output_dir.join("report.json"));
    let csv = out.with_extension("csv");
    write_json(&out, &report)?;
    let groups = res.model.num_groups();
    write_file(
        &csv,
        &format!("{}\n{}\n", QualityReport::csv_header(groups), mean.csv_row(res.config.budget)),
    )?;
    write_json(&meta_path(&csv), &res.meta())?;

    println!(
        "{} at budget {} (cost {:.4}, cache rates {})",
        res.config.mode.name(),
        res.config.budget,
        plan.total_cost,
        percent(&plan.cache_rates())
    );
    println!(
        "mean over {} seed(s): psnr {:.3} dB, ssim {:.6}, modeled speedup {:.3}x",
        report.eval_seeds.len(),
        mean.psnr_db,
        mean.ssim,
        mean.modeled_speedup
    );
    println!("wrote {} and {}", out.display(), csv.display());
    Ok(())
}

#[derive(Serialize)]
struct AttributionReport {
    meta: serde_json::Value,
    mode: RunMode,
    eval_seeds: Vec<u64>,
    per_seed: Vec<Attribution>,
    mean_shares: Vec<f64>,
}

pub fn attribute(cfg: RunConfig, inputs: &Inputs, out: Option<PathBuf>) -> Result<()> {
    let res = Resolved::new(cfg)?;
    let profiles = load_profiles(&res, inputs)?;
    let plan = load_plan(&res, inputs, &profiles)?;
    let options = options_for(res.config.mode, &profiles, res.config.policy);
    let shape = res.model.image_shape();
    let per_seed = res
        .config
        .eval_seeds
        .iter()
        .map(|&seed| {
            let x0 = initial_latent(&shape, seed);
            attribute_error(&res.model, &res.schedule, &x0, &plan.step_decisions, &options)
        })
        .collect::<layercache::Result<Vec<_>>>()?;
    let defined: Vec<&Attribution> = per_seed.iter().filter(|a| a.defined).collect();
    let groups = res.model.num_groups();
    let mean_shares = (0..groups)
        .map(|g| {
            if defined.is_empty() {
                0.0
            } else {
                defined.iter().map(|a| a.shares[g]).sum::<f64>() / defined.len() as f64
            }
        })
        .collect::<Vec<_>>();
    let none_defined = defined.is_empty();
    let report = AttributionReport {
        meta: res.meta(),
        mode: res.config.mode,
        eval_seeds: res.config.eval_seeds.clone(),
        per_seed,
        mean_shares: mean_shares.clone(),
    };
    let out = out.unwrap_or_else(|| res.config.output_dir.join("attribution.json"));
    write_json(&out, &report)?;
    if none_defined {
        println!("plan caches nothing that changes the output; no attribution");
    }
    for (g, s) in mean_shares.iter().enumerate() {
        println!("- g{g}: {:.1}% of final-latent error", 100.0 * s);
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn sweep_header(groups: usize) -> String {
    let mut cols: Vec<String> = ["budget", "mode", "psnr_db", "ssim", "modeled_speedup"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    cols.extend((0..groups).map(|g| format!("attr_g{g}")));
    cols.join(",")
}

pub fn sweep(cfg: RunConfig, modes: &[RunMode], with_attribution: bool, out: Option<PathBuf>) -> Result<()> {
    let res = Resolved::new(cfg)?;
    anyhow::ensure!(!res.config.budgets.is_empty(), Error::Config("no budgets to sweep".into()));
    let profiles = profile_runs(&res.model, &res.schedule, &res.config.profile_seeds)?;
    let setup = SweepSetup {
        model: &res.model,
        schedule: &res.schedule,
        profiles: &profiles,
        costs: &res.costs,
        policy: res.config.policy,
        gamma: res.config.gamma,
        eval_seeds: &res.config.eval_seeds,
        with_attribution,
    };
    let (cells, failure) = budget_sweep(&setup, &res.config.budgets, modes);

    let out = out.unwrap_or_else(|| res.config.output_dir.join("sweep.csv"));
    let mut text = sweep_header(res.model.num_groups()) + "\n";
    for cell in &cells {
        let m = cell.mean_report();
        let mut cols = vec![
            cell.budget.to_string(),
            cell.mode.name().to_string(),
            m.psnr_db.to_string(),
            m.ssim.to_string(),
            m.modeled_speedup.to_string(),
        ];
        cols.extend(m.per_group_attribution.iter().map(|a| a.to_string()));
        text += &(cols.join(",") + "\n");
    }
    if let Some(err) = &failure {
        text += &format!("# ABORTED: {err}\n");
    }
    write_file(&out, &text)?;
    let mut meta = res.meta();
    meta["budgets"] = serde_json::json!(res.config.budgets);
    meta["modes"] = serde_json::json!(modes);
    write_json(&meta_path(&out), &meta)?;

    let mut stdout = std::io::stdout().lock();
    for cell in &cells {
        let m = cell.mean_report();
        writeln!(
            stdout,
            "budget {:>6} {:<10} psnr {:>8.3} dB  ssim {:.5}  speedup {:.3}x",
            cell.budget,
            cell.mode.name(),
            m.psnr_db,
            m.ssim,
            m.modeled_speedup
        )?;
    }
    writeln!(stdout, "wrote {}", out.display())?;
    match failure {
        Some(err) => Err(anyhow::Error::from(err).context("sweep aborted")),
        None => Ok(()),
    }
}
