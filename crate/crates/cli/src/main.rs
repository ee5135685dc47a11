use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use layercache::pipeline::RunMode;

mod commands;
mod config;

use config::{RunConfig, OUT_DIR_ENV};

/// Layer-aware caching for flow-matching samplers: profile a model, plan a
/// compute budget, and measure what caching costs in quality.
#[derive(Parser, Debug)]
#[command(name = "layercache", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Profile full runs into a stability map.
    Profile(ProfileArgs),
    /// Solve a compute/cache plan from a stability map.
    Schedule(ScheduleArgs),
    /// Run a plan against the uncached baseline and report quality.
    Run(EvalArgs),
    /// Evaluate every mode over a list of budgets into a CSV table.
    Sweep(SweepArgs),
    /// Split the final-latent error of a plan across groups.
    Attribute(EvalArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Run config JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = OUT_DIR_ENV)]
    out_dir: Option<PathBuf>,
    /// Model config JSON.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<RunMode>,
    #[arg(long, value_delimiter = ',')]
    profile_seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    eval_seeds: Option<Vec<u64>>,
}

#[derive(Args, Debug)]
struct ProfileArgs {
    #[command(flatten)]
    common: Common,
    /// Output path for the per-group map; the whole-network map is written
    /// next to it with a `.velocity.json` suffix.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write a built-in map instead of profiling the model.
    #[arg(long, value_enum)]
    fixture: Option<Fixture>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Fixture {
    /// Three groups over 50 steps with smooth, oscillating and spiking
    /// change-rate statistics.
    ReferenceStats,
}

#[derive(Args, Debug)]
struct ScheduleArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Plan to evaluate; solved from the maps at the configured budget when
    /// absent.
    #[arg(long)]
    schedule: Option<PathBuf>,
    /// Per-group stability map; profiled in-process when absent.
    #[arg(long)]
    map: Option<PathBuf>,
    /// Whole-network map, needed with `--map` in meancache mode.
    #[arg(long)]
    velocity_map: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',')]
    budgets: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', value_parser = parse_mode, default_value = "layercache,meancache")]
    modes: Vec<RunMode>,
    /// Skip the per-group attribution columns (left at 0).
    #[arg(long)]
    no_attribution: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<RunMode, String> {
    s.parse().map_err(|e: layercache::Error| e.to_string())
}

impl Common {
    /// Config file (or defaults) with every given flag applied on top.
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.out_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = &self.model {
            cfg.model = Some(v.clone());
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.budget {
            cfg.budget = v;
        }
        if let Some(v) = self.gamma {
            cfg.gamma = v;
        }
        if let Some(v) = self.mode {
            cfg.mode = v;
        }
        if let Some(v) = &self.profile_seeds {
            cfg.profile_seeds = v.clone();
        }
        if let Some(v) = &self.eval_seeds {
            cfg.eval_seeds = v.clone();
        }
        Ok(cfg)
    }
}

/// Exit status for a failed command.
fn exit_code(err: &anyhow::Error) -> u8 {
    use layercache::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::InfeasibleBudget { .. } => 3,
                E::Config(_) | E::Json(_) | E::InstanceTooLarge { .. } => 4,
                E::Io { .. } => 5,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 5;
        }
    }
    1
}

/// Error chain joined with `: `, skipping causes already quoted by their
/// parent.
fn describe(err: &anyhow::Error) -> String {
    let mut msg = err.to_string();
    for cause in err.chain().skip(1) {
        let text = cause.to_string();
        if !msg.contains(&text) {
            msg = format!("{msg}: {text}");
        }
    }
    msg
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Profile(a) => a
            .common
            .resolve()
            .and_then(|cfg| commands::profile(cfg, a.out, a.fixture.is_some())),
        Command::Schedule(a) => a.common.resolve().and_then(|cfg| {
            commands::schedule(cfg, a.common.config.is_some(), &a.map, a.out)
        }),
        Command::Run(a) => a.common.resolve().and_then(|cfg| {
            commands::run(cfg, &commands::Inputs::new(a.schedule, a.map, a.velocity_map), a.out)
        }),
        Command::Attribute(a) => a.common.resolve().and_then(|cfg| {
            commands::attribute(cfg, &commands::Inputs::new(a.schedule, a.map, a.velocity_map), a.out)
        }),
        Command::Sweep(a) => a.common.resolve().and_then(|mut cfg| {
            if let Some(b) = a.budgets {
                cfg.budgets = b;
            }
            commands::sweep(cfg, &a.modes, !a.no_attribution, a.out)
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", describe(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}
