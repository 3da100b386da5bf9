//! Dataset files on disk. A file stores scenarios and their oracle plans;
//! prompts and features are rebuilt deterministically on load.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cofine_core::encoding::{build_dataset, split_seed, Dataset, DatasetEntry, Split};
use cofine_core::gridworld::{oracle_plan, DistributionTag, Plan, Scenario};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub scenario: Scenario,
    pub plan: Plan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub split: Split,
    pub distribution: DistributionTag,
    /// Seed of the stream the scenario seeds were drawn from.
    pub stream_seed: u64,
    pub master_seed: u64,
    pub scenarios: Vec<ScenarioRecord>,
}

impl DatasetFile {
    pub fn from_dataset(dataset: &Dataset<f64>, split: Split, master_seed: u64) -> Self {
        DatasetFile {
            split,
            distribution: dataset.distribution,
            stream_seed: dataset.seed,
            master_seed,
            scenarios: dataset
                .entries
                .iter()
                .map(|e| ScenarioRecord {
                    scenario: e.scenario.clone(),
                    plan: e.plan.clone(),
                })
                .collect(),
        }
    }

    pub fn into_dataset(self) -> Dataset<f64> {
        Dataset {
            distribution: self.distribution,
            seed: self.stream_seed,
            entries: self
                .scenarios
                .into_iter()
                .map(|r| DatasetEntry::from_scenario(r.scenario, r.plan))
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let file: DatasetFile =
            serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?;
        for r in &file.scenarios {
            let replanned = oracle_plan(&r.scenario)?;
            if replanned != r.plan {
                bail!("{}: stored plan for scenario {} does not match the planner", path.display(), r.scenario.id);
            }
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?).with_context(|| format!("writing {}", path.display()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: Split,
    pub file: String,
    pub distribution: DistributionTag,
    pub stream_seed: u64,
    pub scenarios: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub master_seed: u64,
    pub datasets: Vec<ManifestEntry>,
}

/// The train, calibration and validation splits of one run.
pub struct Splits {
    pub train: Dataset<f64>,
    pub calib: Dataset<f64>,
    pub val: Dataset<f64>,
}

fn split_size(config: &RunConfig, split: Split) -> usize {
    match split {
        Split::Train => config.sizes.train,
        Split::Calibration => config.sizes.calib,
        Split::Validation => config.sizes.val,
        Split::Ood => config.sizes.ood,
    }
}

fn split_file(split: Split) -> &'static str {
    match split {
        Split::Train => "train.json",
        Split::Calibration => "calib.json",
        Split::Validation => "val.json",
        Split::Ood => "ood.json",
    }
}

pub fn generate(config: &RunConfig, split: Split) -> Result<Dataset<f64>> {
    let distribution = match split {
        Split::Ood => DistributionTag::DPrime,
        _ => config.distribution,
    };
    Ok(build_dataset(split_size(config, split), distribution, split_seed(config.seed, split))?)
}

/// Writes the three in-distribution splits and a manifest into `dir`.
pub fn write_splits(config: &RunConfig, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let mut datasets = Vec::new();
    for split in [Split::Train, Split::Calibration, Split::Validation] {
        let data = generate(config, split)?;
        let file = split_file(split);
        DatasetFile::from_dataset(&data, split, config.seed).save(&dir.join(file))?;
        datasets.push(ManifestEntry {
            split,
            file: file.to_string(),
            distribution: data.distribution,
            stream_seed: data.seed,
            scenarios: data.len(),
            steps: data.n_steps(),
        });
    }
    let manifest = Manifest {
        master_seed: config.seed,
        datasets,
    };
    std::fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

fn load_split(dir: &Path, manifest: &Manifest, split: Split) -> Result<Dataset<f64>> {
    let entry = manifest
        .datasets
        .iter()
        .find(|d| d.split == split)
        .with_context(|| format!("manifest in {} lists no {split:?} split", dir.display()))?;
    Ok(DatasetFile::load(&dir.join(&entry.file))?.into_dataset())
}

/// Reads the splits from `dir` when given, otherwise regenerates them from
/// the config's seed.
pub fn load_or_generate(config: &RunConfig, dir: Option<&PathBuf>) -> Result<Splits> {
    match dir {
        Some(dir) => {
            let path = dir.join(MANIFEST);
            let manifest: Manifest = serde_json::from_slice(
                &std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?,
            )?;
            Ok(Splits {
                train: load_split(dir, &manifest, Split::Train)?,
                calib: load_split(dir, &manifest, Split::Calibration)?,
                val: load_split(dir, &manifest, Split::Validation)?,
            })
        }
        None => Ok(Splits {
            train: generate(config, Split::Train)?,
            calib: generate(config, Split::Calibration)?,
            val: generate(config, Split::Validation)?,
        }),
    }
}
