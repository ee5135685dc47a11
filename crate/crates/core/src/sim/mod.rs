//! Synthetic layered velocity network and the Euler samplers that drive it.

mod history;
mod model;
mod runner;
mod schedule;

pub use history::{GroupHistory, HistoryRecord};
pub use model::{Activation, Forward, GroupConfig, ModelConfig, SyntheticModel, TimeProfile};
pub use runner::{
    euler_step, run_cached, run_cached_observed, run_full, CacheObserver, CacheOptions, CachedRun,
    EstimationMode, FullRun, GroupEstimate, GroupTrace, StepRecord,
};
pub use schedule::SigmaSchedule;
