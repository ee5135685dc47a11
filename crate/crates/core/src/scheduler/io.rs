//! Schedule files: the plan itself plus an optional `.meta.json` sidecar.

use std::path::{Path, PathBuf};

use super::{Schedule, ScheduleMeta};
use crate::error::{Error, Result};

/// Sidecar path holding a schedule's provenance.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

impl Schedule {
    /// Pretty JSON with keys `step_decisions`, `k_values`, `total_cost`,
    /// `total_error` in that order.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schedule: Self = serde_json::from_str(text)?;
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))?;
        if let Some(meta) = &self.meta {
            let side = meta_path(path);
            let text = serde_json::to_string_pretty(meta)? + "\n";
            std::fs::write(&side, text).map_err(|e| Error::io(&side, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut schedule = Self::from_json(&text)?;
        let side = meta_path(path);
        if side.exists() {
            let meta = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
            schedule.meta = Some(serde_json::from_str::<ScheduleMeta>(&meta)?);
        }
        Ok(schedule)
    }
}
