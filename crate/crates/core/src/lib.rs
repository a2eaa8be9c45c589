//! Centroid-aware feature recalibration for classification.
//!
//! A backbone maps each input vector to an embedding `E`. A recalibration
//! block attends from `E` to the current per-class centroid embeddings and
//! produces `E_R = softmax(Q·Kᵀ)·V`. The two are merged (by default,
//! concatenated) and classified by a single affine layer. Centroids are
//! per-class means of the previous epoch's training embeddings and are
//! fixed at inference.
//!
//! Modules:
//!
//! - [`tensor`], [`graph`], [`gradcheck`]: the `f64` numeric core with
//!   reverse-mode differentiation and a finite-difference checker.
//! - [`model`]: backbone, recalibration block, merge strategies, parameter
//!   counting; [`checkpoint`] stores all of it.
//! - [`centroids`]: per-epoch centroid accumulation and the freeze contract.
//! - [`data`]: synthetic shifted Gaussian splits, CSV I/O, batching.
//! - [`metrics`]: confusion matrix, accuracy, macro P/R/F1, quadratic kappa.
//! - [`optim`], [`trainer`]: Adam, warm-restart schedule, the epoch loop,
//!   validation-based selection and evaluation.

pub mod centroids;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use centroids::CentroidTable;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{batches, gen_synthetic, Dataset, DatasetSpec, Split, SplitCounts, Splits};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId};
pub use metrics::{confusion, kappa_quadratic, ConfusionMatrix, MetricsReport};
pub use model::{count_params, Merge, Model, ModelConfig, ModelParams};
pub use optim::{AdamState, ScheduleConfig};
pub use tensor::Tensor;
pub use trainer::{
    evaluate, fit, run_epoch, FitOutcome, SelectionMetric, TrainConfig, TrainRecord, TrainState,
};
