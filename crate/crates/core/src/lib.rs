//! Layer-aware caching for flow-matching ODE samplers.
//!
//! A seeded layered velocity network stands in for a diffusion transformer.
//! Profiling its group outputs yields a stability map; a budgeted greedy
//! solver turns the map into a per-step, per-group compute/cache plan; the
//! cached sampler extrapolates skipped groups from their own history.

pub mod error;
pub mod jvp;
pub mod latent;
pub mod metrics;
pub mod pipeline;
pub mod profiler;
pub mod scheduler;
pub mod sim;

pub use error::{Error, Result};
pub use latent::LatentState;
