//! The training loop.
//!
//! One epoch runs every training batch against the centroid table as it
//! stood when the epoch began: forward, mean cross-entropy, backward, one
//! Adam step, then the batch's detached embeddings go into the table's
//! running sums. After the last batch the table replaces each centroid by
//! its class mean. If any batch fails, the running sums are discarded and
//! the centroids stay as they were.
//!
//! [`fit`] repeats this for the configured number of epochs, scores the
//! validation split after each one with a frozen copy of the table, and
//! keeps the best-scoring state (earliest epoch on ties).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::centroids::CentroidTable;
use crate::checkpoint::Checkpoint;
use crate::data::{batches, Batch, Dataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{confusion, ConfusionMatrix, MetricsReport};
use crate::model::{model_forward, Model, ModelConfig};
use crate::optim::{AdamState, ScheduleConfig};

/// Validation metric used to pick the reported model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    #[default]
    Accuracy,
    F1Macro,
    KappaQuadratic,
}

impl SelectionMetric {
    pub fn score(self, report: &MetricsReport) -> f64 {
        match self {
            SelectionMetric::Accuracy => report.accuracy,
            SelectionMetric::F1Macro => report.f1_macro,
            SelectionMetric::KappaQuadratic => report.kappa_quadratic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub selection_metric: SelectionMetric,
    /// Seeds the per-epoch batch order.
    #[serde(default)]
    pub shuffle_seed: u64,
}

fn default_batch_size() -> usize {
    32
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: ScheduleConfig::default(),
            batch_size: default_batch_size(),
            selection_metric: SelectionMetric::Accuracy,
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything needed to resume training or evaluate.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub centroids: CentroidTable,
    pub optimizer: AdamState,
    pub schedule: ScheduleConfig,
    /// Epochs completed; also the index of the next epoch.
    pub epoch: usize,
    pub shuffle_seed: u64,
}

impl TrainState {
    pub fn new(config: ModelConfig, schedule: ScheduleConfig, shuffle_seed: u64) -> Result<Self> {
        let model = Model::new(config)?;
        let optimizer = AdamState::new(model.params.named().into_iter().map(|(_, t)| t));
        let centroids = CentroidTable::new(model.config.classes, model.config.embed_dim);
        Ok(TrainState {
            model,
            centroids,
            optimizer,
            schedule,
            epoch: 0,
            shuffle_seed,
        })
    }

    /// Batch order of epoch `epoch`.
    pub fn epoch_batches(&self, train: &Dataset, batch_size: usize, epoch: usize) -> Vec<Batch> {
        batches(
            train,
            batch_size,
            self.shuffle_seed.wrapping_add(epoch as u64),
            true,
        )
    }

    /// Run the next epoch at its scheduled learning rate.
    pub fn train_epoch(&mut self, train: &Dataset, batch_size: usize) -> Result<EpochStats> {
        let lr = self.schedule.lr_at(self.epoch);
        let bs = self.epoch_batches(train, batch_size, self.epoch);
        let stats = run_epoch(
            &mut self.model,
            &mut self.centroids,
            &bs,
            &mut self.optimizer,
            lr,
        )?;
        self.epoch += 1;
        Ok(stats)
    }

    pub fn evaluate(&self, dataset: &Dataset) -> Result<MetricsReport> {
        evaluate(&self.model, &self.centroids, dataset)
    }

    /// SHA-256 over the bit patterns of every parameter and the whole
    /// centroid table.
    pub fn checksum(&self) -> String {
        state_checksum(&self.model, &self.centroids)
    }
}

pub fn state_checksum(model: &Model, centroids: &CentroidTable) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    let mut put = |name: &str, data: &[f64]| {
        h.update(name.as_bytes());
        for v in data {
            h.update(v.to_bits().to_le_bytes());
        }
    };
    for (name, t) in model.params.named() {
        put(&name, t.data());
    }
    put("centroids", centroids.centroids().data());
    put("accum", centroids.accum().data());
    for c in centroids.counts().iter().chain(centroids.last_counts()) {
        h.update(c.to_le_bytes());
    }
    h.update([u8::from(centroids.is_frozen())]);
    h.update(centroids.epoch_stamp().to_le_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// Batch-size-weighted mean training loss.
    pub mean_loss: f64,
    /// Centroid epoch stamp read by each batch's forward pass.
    pub batch_stamps: Vec<u64>,
    pub samples: usize,
}

/// Run one epoch over `batches`, then finalize the centroid table.
pub fn run_epoch(
    model: &mut Model,
    centroids: &mut CentroidTable,
    batches: &[Batch],
    optimizer: &mut AdamState,
    lr: f64,
) -> Result<EpochStats> {
    if centroids.is_frozen() {
        return Err(Error::Frozen);
    }
    match run_batches(model, centroids, batches, optimizer, lr) {
        Ok(stats) => {
            centroids.finalize_epoch()?;
            Ok(stats)
        }
        Err(e) => {
            centroids.discard_accumulation()?;
            Err(e)
        }
    }
}

fn run_batches(
    model: &mut Model,
    centroids: &mut CentroidTable,
    batches: &[Batch],
    optimizer: &mut AdamState,
    lr: f64,
) -> Result<EpochStats> {
    let names = model.params.names();
    let mut weighted = 0.0;
    let mut samples = 0;
    let mut batch_stamps = Vec::with_capacity(batches.len());
    for batch in batches {
        let n = batch.labels.len();
        if n == 0 {
            continue;
        }
        let mut graph = Graph::new();
        let bound = model.params.bind(&mut graph);
        batch_stamps.push(centroids.epoch_stamp());
        let fwd = model_forward(
            &mut graph,
            &batch.features,
            &bound,
            &model.config,
            centroids.centroids(),
        )?;
        let loss = graph.cross_entropy(fwd.logits, &batch.labels)?;
        let loss_value = graph.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!("training loss {loss_value}")));
        }
        let mut grads = graph.backward(loss)?;
        let grads: Vec<_> = bound
            .ids()
            .into_iter()
            .map(|id| grads.take(id).expect("every parameter is a variable"))
            .collect();
        optimizer.step(model.params.tensors_mut(), &grads, &names, lr)?;
        centroids.accumulate(graph.value(fwd.embeddings), &batch.labels)?;
        weighted += loss_value * n as f64;
        samples += n;
    }
    Ok(EpochStats {
        mean_loss: if samples == 0 {
            0.0
        } else {
            weighted / samples as f64
        },
        batch_stamps,
        samples,
    })
}

const EVAL_CHUNK: usize = 1024;

/// Score `dataset` with a frozen copy of `centroids`. Nothing passed in is
/// modified.
pub fn evaluate(
    model: &Model,
    centroids: &CentroidTable,
    dataset: &Dataset,
) -> Result<MetricsReport> {
    let cfg = &model.config;
    if dataset.d_in() != cfg.d_in {
        return Err(Error::shape(
            "evaluate",
            format!(
                "dataset has {} features, model expects {}",
                dataset.d_in(),
                cfg.d_in
            ),
        ));
    }
    if let Some(&bad) = dataset.labels.iter().find(|&&l| l >= cfg.classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: cfg.classes,
        });
    }
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let mut frozen = centroids.clone();
    frozen.freeze();
    let mut cm = ConfusionMatrix::zeros(cfg.classes);
    for b in batches(dataset, EVAL_CHUNK, 0, false) {
        let preds = model.predict(&b.features, frozen.centroids())?;
        cm.merge(&confusion(&preds, &b.labels, cfg.classes)?)?;
    }
    MetricsReport::from_confusion(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Stamp of the centroid table every batch of this epoch read.
    pub centroid_epoch_stamp: u64,
    pub val: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub selection_metric: SelectionMetric,
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
    /// Checkpoint file names, relative to the output directory.
    pub checkpoints: Vec<String>,
}

impl TrainRecord {
    pub fn selected(&self) -> &EpochRecord {
        &self.epochs[self.selected_epoch]
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub record: TrainRecord,
    /// State after the selected epoch.
    pub best: TrainState,
    /// State after the last epoch.
    pub last: TrainState,
}

pub const BEST_CHECKPOINT: &str = "best.json";
pub const FINAL_CHECKPOINT: &str = "final.json";

/// Train from scratch, selecting by validation score. When `out_dir` is
/// given, a checkpoint is written for each improvement, plus the selected
/// and final states.
pub fn fit(
    config: &ModelConfig,
    train: &Dataset,
    val: &Dataset,
    train_cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<FitOutcome> {
    config.validate()?;
    train_cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut state = TrainState::new(
        config.clone(),
        train_cfg.schedule.clone(),
        train_cfg.shuffle_seed,
    )?;
    let mut epochs = Vec::with_capacity(train_cfg.schedule.epochs);
    let mut checkpoints = Vec::new();
    let mut best: Option<(f64, TrainState)> = None;
    let mut selected_epoch = 0;

    for epoch in 0..train_cfg.schedule.epochs {
        let lr = state.schedule.lr_at(epoch);
        let stamp = state.centroids.epoch_stamp();
        let stats = state.train_epoch(train, train_cfg.batch_size)?;
        let report = state.evaluate(val)?;
        let score = train_cfg.selection_metric.score(&report);
        epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: stats.mean_loss,
            centroid_epoch_stamp: stamp,
            val: report,
        });
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            selected_epoch = epoch;
            if let Some(dir) = out_dir {
                let name = format!("epoch_{epoch:03}.json");
                Checkpoint::from_state(&state).save(&dir.join(&name))?;
                checkpoints.push(name);
            }
            best = Some((score, state.clone()));
        }
    }

    let best = best.expect("at least one epoch").1;
    if let Some(dir) = out_dir {
        Checkpoint::from_state(&best).save(&dir.join(BEST_CHECKPOINT))?;
        Checkpoint::from_state(&state).save(&dir.join(FINAL_CHECKPOINT))?;
        checkpoints.push(BEST_CHECKPOINT.into());
        checkpoints.push(FINAL_CHECKPOINT.into());
    }
    Ok(FitOutcome {
        record: TrainRecord {
            selection_metric: train_cfg.selection_metric,
            epochs,
            selected_epoch,
            checkpoints,
        },
        best,
        last: state,
    })
}
