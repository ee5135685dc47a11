//! Run configuration: a JSON file, overridden field by field from flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use layercache::jvp::AdaptiveKPolicy;
use layercache::pipeline::RunMode;
use layercache::scheduler::GroupCosts;
use layercache::sim::{ModelConfig, SigmaSchedule, SyntheticModel};

pub const OUT_DIR_ENV: &str = "LAYERCACHE_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Model config JSON; the built-in three-regime model when absent.
    /// Relative paths resolve against the config file's directory.
    pub model: Option<PathBuf>,
    pub steps: usize,
    /// Expected group count, checked against the model when set.
    pub groups: Option<usize>,
    pub budget: f64,
    pub gamma: f64,
    pub policy: AdaptiveKPolicy,
    /// Per-group costs; proportional to layer counts when absent.
    pub costs: Option<Vec<f64>>,
    /// Per-group error weights; all ones when absent.
    pub weights: Option<Vec<f64>>,
    pub profile_seeds: Vec<u64>,
    pub eval_seeds: Vec<u64>,
    pub budgets: Vec<f64>,
    pub output_dir: PathBuf,
    pub mode: RunMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: None,
            steps: 50,
            groups: None,
            budget: 25.0,
            gamma: 4.0,
            policy: AdaptiveKPolicy::default(),
            costs: None,
            weights: None,
            profile_seeds: vec![0, 1, 2],
            eval_seeds: vec![100, 101, 102],
            budgets: vec![15.0, 20.0, 25.0, 30.0, 35.0],
            output_dir: PathBuf::from("out"),
            mode: RunMode::LayerCache,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| layercache::Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(layercache::Error::from)
            .with_context(|| format!("reading run config {}", path.display()))?;
        if let (Some(model), Some(dir)) = (cfg.model.as_mut(), path.parent()) {
            if model.is_relative() {
                *model = dir.join(&*model);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(layercache::Error::Config(msg).into());
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if !(self.gamma >= 1.0) {
            return bad(format!("gamma must be at least 1, got {}", self.gamma));
        }
        if self.profile_seeds.is_empty() || self.eval_seeds.is_empty() {
            return bad("profile_seeds and eval_seeds must be non-empty".into());
        }
        if let Some(model) = &self.model {
            if !model.exists() {
                return bad(format!("model config {} does not exist", model.display()));
            }
        }
        self.policy.validate()?;
        Ok(())
    }
}

/// Everything a command needs, resolved from a validated config.
pub struct Resolved {
    pub config: RunConfig,
    pub model: SyntheticModel,
    pub schedule: SigmaSchedule,
    pub costs: GroupCosts,
    pub fingerprint: String,
}

impl Resolved {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model_config = match &config.model {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| layercache::Error::io(path, e))?;
                serde_json::from_str(&text)
                    .map_err(layercache::Error::from)
                    .with_context(|| format!("reading model config {}", path.display()))?
            }
            None => ModelConfig::heterogeneous(),
        };
        let model = SyntheticModel::new(model_config.clone())?;
        let groups = model.num_groups();
        if let Some(expected) = config.groups {
            if expected != groups {
                return Err(layercache::Error::Config(format!(
                    "config expects {expected} groups but the model has {groups}"
                ))
                .into());
            }
        }
        let defaults = GroupCosts::from_layers(&model.layer_counts())?;
        let costs = GroupCosts::new(
            config.costs.clone().unwrap_or(defaults.c),
            config.weights.clone().unwrap_or(defaults.w),
        )?;
        let schedule = SigmaSchedule::linear(config.steps)?;
        let fingerprint = fingerprint(&config, &model_config);
        Ok(Self {
            config,
            model,
            schedule,
            costs,
            fingerprint,
        })
    }

    /// Provenance block attached to every output.
    pub fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "fingerprint": self.fingerprint,
            "steps": self.config.steps,
            "groups": self.model.num_groups(),
            "profile_seeds": self.config.profile_seeds,
            "eval_seeds": self.config.eval_seeds,
        })
    }
}

/// SHA-256 of the config with the model inlined and the output directory
/// dropped. Keys serialize sorted, so equal configs hash equally.
pub fn fingerprint(config: &RunConfig, model: &ModelConfig) -> String {
    let mut value = serde_json::to_value(config).expect("config serializes");
    let obj = value.as_object_mut().expect("config is an object");
    obj.remove("output_dir");
    obj.insert("model".into(), serde_json::to_value(model).expect("model serializes"));
    let canonical = serde_json::to_string(&value).expect("value serializes");
    Sha256::digest(canonical.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
