//! Documents written by the commands.
//!
//! Reports hold only values that follow from the inputs, so re-running a
//! command reproduces them byte for byte. Wall-clock times go to a separate
//! timings file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use centroid_recal::{DatasetSpec, MetricsReport, SelectionMetric, TrainRecord};

use crate::config::RunConfig;

pub const REPORT_FORMAT_VERSION: u32 = 1;
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub val: MetricsReport,
    #[serde(rename = "testI")]
    pub test_i: MetricsReport,
    #[serde(rename = "testII")]
    pub test_ii: MetricsReport,
}

impl SplitMetrics {
    /// testI accuracy minus testII accuracy.
    pub fn drop(&self) -> f64 {
        self.test_i.accuracy - self.test_ii.accuracy
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_f1_macro: f64,
    pub val_kappa_quadratic: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub selection_metric: SelectionMetric,
    pub selected_epoch: usize,
    pub epochs_run: usize,
    pub params: usize,
    pub epochs: Vec<EpochSummary>,
    pub checkpoints: Vec<String>,
}

impl TrainSummary {
    pub fn new(record: &TrainRecord, params: usize) -> Self {
        TrainSummary {
            selection_metric: record.selection_metric,
            selected_epoch: record.selected_epoch,
            epochs_run: record.epochs.len(),
            params,
            epochs: record
                .epochs
                .iter()
                .map(|e| EpochSummary {
                    epoch: e.epoch,
                    lr: e.lr,
                    train_loss: e.train_loss,
                    val_accuracy: e.val.accuracy,
                    val_f1_macro: e.val.f1_macro,
                    val_kappa_quadratic: e.val.kappa_quadratic,
                })
                .collect(),
            checkpoints: record.checkpoints.clone(),
        }
    }
}

/// What `train` writes to `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub artifact_version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub metrics: SplitMetrics,
    #[serde(rename = "drop_testI_to_testII")]
    pub drop_test_i_to_test_ii: f64,
    pub train: TrainSummary,
}

/// Wall-clock seconds per phase. Not part of any report.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Timings {
    pub phases: BTreeMap<String, f64>,
}

/// What `gen-data` writes next to the CSVs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub artifact_version: String,
    pub seed: u64,
    pub spec: DatasetSpec,
    pub files: BTreeMap<String, ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub rows: usize,
    pub class_counts: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation (n − 1); zero for a single run.
    pub sd: f64,
}

impl MeanSd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        MeanSd { mean, sd }
    }
}

/// Mean and sd of the headline metrics over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: MeanSd,
    pub precision_macro: MeanSd,
    pub recall_macro: MeanSd,
    pub f1_macro: MeanSd,
    pub kappa_quadratic: MeanSd,
}

impl MetricSummary {
    pub fn of(reports: &[&MetricsReport]) -> Self {
        let col = |f: fn(&MetricsReport) -> f64| {
            MeanSd::of(&reports.iter().map(|r| f(r)).collect::<Vec<_>>())
        };
        MetricSummary {
            accuracy: col(|r| r.accuracy),
            precision_macro: col(|r| r.precision_macro),
            recall_macro: col(|r| r.recall_macro),
            f1_macro: col(|r| r.f1_macro),
            kappa_quadratic: col(|r| r.kappa_quadratic),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub params: usize,
    pub runs: usize,
    #[serde(rename = "testI")]
    pub test_i: MetricSummary,
    #[serde(rename = "testII")]
    pub test_ii: MetricSummary,
    #[serde(rename = "drop_testI_to_testII")]
    pub drop_test_i_to_test_ii: MeanSd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub selected_epoch: usize,
    #[serde(rename = "testI_accuracy")]
    pub test_i_accuracy: f64,
    #[serde(rename = "testII_accuracy")]
    pub test_ii_accuracy: f64,
    #[serde(rename = "drop_testI_to_testII")]
    pub drop_test_i_to_test_ii: f64,
}

/// What `ablate` writes to `ablation.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub format_version: u32,
    pub artifact_version: String,
    pub seeds: Vec<u64>,
    pub config: RunConfig,
    pub rows: Vec<AblationRow>,
    /// Variant with the smallest mean accuracy drop. Reported, not checked.
    pub smallest_mean_drop: String,
    pub runs: Vec<AblationRun>,
}

impl AblationTable {
    /// Markdown rendering: accuracy and kappa as mean ± sd per split.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from(
            "| variant | params | testI acc | testI kappa | testII acc | testII kappa | drop testI→testII |\n\
             |---|---:|---:|---:|---:|---:|---:|\n",
        );
        let pm = |m: MeanSd| format!("{:.4} ± {:.4}", m.mean, m.sd);
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {} |\n",
                r.variant,
                r.params,
                pm(r.test_i.accuracy),
                pm(r.test_i.kappa_quadratic),
                pm(r.test_ii.accuracy),
                pm(r.test_ii.kappa_quadratic),
                pm(r.drop_test_i_to_test_ii)
            ));
        }
        out.push_str(&format!(
            "\nSeeds: {:?}. Smallest mean drop: {}.\n",
            self.seeds, self.smallest_mean_drop
        ));
        out
    }
}
