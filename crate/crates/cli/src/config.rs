//! Run configuration documents.
//!
//! A run config names the model, the schedule, where the data comes from
//! and how to batch and select. Relative paths are taken relative to the
//! config file and must exist when the config is loaded.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use centroid_recal::data::Split;
use centroid_recal::{
    gen_synthetic, Dataset, DatasetSpec, ModelConfig, ScheduleConfig, SelectionMetric, Splits,
};

pub const RUN_CONFIG_VERSION: u32 = 1;

/// CSV files for the four splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvPaths {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test_i: PathBuf,
    pub test_ii: PathBuf,
}

impl CsvPaths {
    fn get(&self, split: Split) -> &Path {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::TestI => &self.test_i,
            Split::TestIi => &self.test_ii,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut PathBuf {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::TestI => &mut self.test_i,
            Split::TestIi => &mut self.test_ii,
        }
    }
}

/// Where a run's data comes from. Exactly one key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Dataset spec written inline.
    Spec(DatasetSpec),
    /// Path to a dataset spec document.
    SpecPath(PathBuf),
    /// Pre-generated CSV splits.
    Csv(CsvPaths),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    /// `model.seed` is replaced by the run seed.
    pub model: ModelConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    pub data: DataSource,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub selection_metric: SelectionMetric,
    /// Seeds parameter init and batch order. `--seed` overrides it.
    #[serde(default)]
    pub seed: u64,
    /// Where outputs go when `--out` is not given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn default_batch_size() -> usize {
    32
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).context("parsing run config")?;
        if cfg.format_version != RUN_CONFIG_VERSION {
            bail!(
                "run config format_version {} is not supported (expected {RUN_CONFIG_VERSION})",
                cfg.format_version
            );
        }
        Ok(cfg)
    }

    /// Read, resolve relative paths against the file's directory and check
    /// that everything referenced exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::from_json(&text).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base)?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) -> Result<()> {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data {
            DataSource::Spec(_) => {}
            DataSource::SpecPath(p) => {
                fix(p);
                if !p.is_file() {
                    bail!("data.spec_path {} does not exist", p.display());
                }
            }
            DataSource::Csv(paths) => {
                for split in Split::ALL {
                    let p = paths.get_mut(split);
                    fix(p);
                    if !p.is_file() {
                        bail!("data.csv.{} {} does not exist", split.name(), p.display());
                    }
                }
            }
        }
        if let Some(p) = &mut self.output_dir {
            fix(p);
        }
        Ok(())
    }

    /// The model config with the run seed applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            ..self.model.clone()
        }
    }

    pub fn train_config(&self) -> centroid_recal::TrainConfig {
        centroid_recal::TrainConfig {
            schedule: self.schedule.clone(),
            batch_size: self.batch_size,
            selection_metric: self.selection_metric,
            shuffle_seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train_config().validate()?;
        if let DataSource::Spec(spec) = &self.data {
            spec.validate().context("data.spec")?;
        }
        Ok(())
    }

    /// Materialize the four splits.
    pub fn load_data(&self) -> Result<Splits> {
        let splits = match &self.data {
            DataSource::Spec(spec) => gen_synthetic(spec)?,
            DataSource::SpecPath(p) => {
                let spec = DatasetSpec::load(p)
                    .with_context(|| format!("loading spec {}", p.display()))?;
                gen_synthetic(&spec)?
            }
            DataSource::Csv(paths) => {
                let load = |split: Split| -> Result<Dataset> {
                    let p = paths.get(split);
                    Dataset::load_csv(p).with_context(|| format!("loading {} split", split.name()))
                };
                Splits {
                    train: load(Split::Train)?,
                    val: load(Split::Val)?,
                    test_i: load(Split::TestI)?,
                    test_ii: load(Split::TestIi)?,
                }
            }
        };
        for split in Split::ALL {
            let ds = splits.get(split);
            if ds.d_in() != self.model.d_in {
                bail!(
                    "{} split has {} features but model.d_in is {}",
                    split.name(),
                    ds.d_in(),
                    self.model.d_in
                );
            }
            if let Some(&l) = ds.labels.iter().find(|&&l| l >= self.model.classes) {
                bail!(
                    "{} split has label {l} but model.classes is {}",
                    split.name(),
                    self.model.classes
                );
            }
        }
        Ok(splits)
    }
}
