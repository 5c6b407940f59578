//! Run configuration: merges flags, an optional JSON file and `TABICL_SEED`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use tabicl::infer::MemoryModel;
use tabicl::prior::PriorConfig;
use tabicl::train::{CurriculumConfig, Profile};

use crate::exit::UsageError;

pub const SEED_ENV: &str = "TABICL_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ProfileName {
    Paper,
    #[default]
    Desk,
}

impl From<ProfileName> for Profile {
    fn from(p: ProfileName) -> Self {
        match p {
            ProfileName::Paper => Profile::Paper,
            ProfileName::Desk => Profile::Desk,
        }
    }
}

/// Contents of `--config`. Every field is optional; flags override them.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub profile: Option<ProfileName>,
    pub workers: Option<usize>,
    pub memory_budget_mb: Option<f64>,
    pub memory_model: Option<MemoryModel>,
    pub ensemble: Option<usize>,
    pub test_fraction: Option<f64>,
    pub repeats: Option<usize>,
    pub prior: Option<PriorConfig>,
    pub curriculum: Option<CurriculumConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
    }
}

/// Flag value, else file value, else default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// `--seed`, else the config file, else `TABICL_SEED`, else 0.
pub fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> anyhow::Result<u64> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| UsageError(format!("{SEED_ENV}={v:?} is not an unsigned integer")).into()),
        Err(_) => Ok(0),
    }
}

/// Echoed into every artifact a command writes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub profile: ProfileName,
    pub paths: BTreeMap<String, PathBuf>,
    pub memory_budget_mb: Option<f64>,
    pub ensemble: Option<usize>,
    pub workers: Option<usize>,
    pub version: String,
}

impl RunConfig {
    pub fn new(command: &str, seed: u64, profile: ProfileName, workers: Option<usize>) -> Self {
        RunConfig {
            command: command.to_string(),
            seed,
            profile,
            paths: BTreeMap::new(),
            memory_budget_mb: None,
            ensemble: None,
            workers,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn with_path(mut self, role: &str, path: &Path) -> Self {
        self.paths.insert(role.to_string(), path.to_path_buf());
        self
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        if self.workers == Some(0) {
            return Err(UsageError("--workers must be at least 1".into()));
        }
        if self.ensemble == Some(0) {
            return Err(UsageError("--ensemble must be at least 1".into()));
        }
        if let Some(b) = self.memory_budget_mb {
            if !(b.is_finite() && b > 0.0) {
                return Err(UsageError(format!("--memory-budget {b} must be a positive number of MB")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }
}

/// `<path>.run.json`, the provenance file written next to CSV outputs.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".run.json");
    path.with_file_name(name)
}
