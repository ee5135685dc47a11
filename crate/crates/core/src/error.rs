use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value{}{}", fmt_group(*.group), fmt_step(*.step))]
    NonFinite {
        group: Option<usize>,
        step: Option<usize>,
    },

    #[error("group {group} has {available} committed record(s); at least 2 are required")]
    InsufficientHistory { group: usize, available: usize },

    #[error("degenerate sigma spacing: both history endpoints sit at sigma = {sigma}")]
    DegenerateSpacing { sigma: f64 },

    #[error("degenerate interval: s = t = {0}")]
    DegenerateInterval(f64),

    #[error("budget {budget} cannot cover the mandatory first step (cost {required})")]
    InfeasibleBudget { budget: f64, required: f64 },

    #[error("instance has {cells} schedulable cells; exhaustive search supports at most {limit}")]
    InstanceTooLarge { cells: usize, limit: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

fn fmt_group(group: Option<usize>) -> String {
    group.map(|g| format!(" in group {g}")).unwrap_or_default()
}

fn fmt_step(step: Option<usize>) -> String {
    step.map(|s| format!(" at step {s}")).unwrap_or_default()
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Attach a step index to a numeric error raised below the runner.
    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            Error::NonFinite { group, step: None } => Error::NonFinite {
                group,
                step: Some(step),
            },
            other => other,
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
