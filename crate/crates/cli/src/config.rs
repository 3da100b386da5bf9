//! Run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use cofine_core::gridworld::DistributionTag;
use cofine_core::training::{LossConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSizes {
    pub train: usize,
    pub calib: usize,
    pub val: usize,
    /// Shifted-distribution scenarios used by `eval-ood`.
    pub ood: usize,
}

impl Default for DatasetSizes {
    fn default() -> Self {
        DatasetSizes {
            train: 4000,
            calib: 400,
            val: 400,
            ood: 80,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub distribution: DistributionTag,
    pub sizes: DatasetSizes,
    pub alpha: f64,
    pub loss: LossConfig,
    pub train: TrainConfig,
    /// Number of independent training seeds, starting at `seed`.
    pub seeds: usize,
    /// Master seed for data generation and the first training run.
    pub seed: u64,
    pub hidden: Vec<usize>,
    /// Fraction of training scenarios held out to monitor early stopping.
    pub monitor_fraction: f64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            distribution: DistributionTag::D,
            sizes: DatasetSizes::default(),
            alpha: 0.05,
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            seeds: 3,
            seed: 1,
            hidden: vec![256, 256],
            monitor_fraction: 0.1,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let bytes = std::fs::read(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_slice(&bytes).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        let s = &self.sizes;
        if s.train == 0 || s.calib == 0 || s.val == 0 || s.ood == 0 {
            return bad("dataset sizes must be > 0");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if self.seeds == 0 {
            return bad("seeds must be >= 1");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layer widths must be non-empty and > 0");
        }
        if !(0.0..1.0).contains(&self.monitor_fraction) {
            return bad("monitor_fraction must lie in [0, 1)");
        }
        self.loss.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed + i).collect()
    }
}
