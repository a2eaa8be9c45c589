//! Self-describing JSON checkpoints.
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "config": { ...model config... },
//!   "params": [{ "name": "backbone.0.weight", "shape": [16, 32], "data": [[...], ...] }, ...],
//!   "centroids": { "values": {...}, "accum": {...}, "counts": [...], "last_counts": [...],
//!                  "frozen": false, "epoch_stamp": 7 },
//!   "optimizer": { "beta1": 0.9, "beta2": 0.999, "epsilon": 1e-8, "step": 441,
//!                  "m": [...named arrays...], "v": [...] },
//!   "schedule": { "base_lr": 0.001, "eta_min": 0.001, "t0": 20, "t_mult": 1, "epochs": 50,
//!                 "next_epoch": 7 },
//!   "rng": { "algorithm": "splitmix64", "shuffle_seed": 0, "epochs_drawn": 7 }
//! }
//! ```
//!
//! Floats are written in shortest round-trip form and parsed exactly, so a
//! save/load cycle reproduces every bit. Array shapes are checked against
//! both their nested data and the model config.

use std::fs;
use std::io::ErrorKind;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::centroids::CentroidTable;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::optim::{AdamState, ScheduleConfig};
use crate::tensor::Tensor;
use crate::trainer::TrainState;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const RNG_ALGORITHM: &str = "splitmix64";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<Vec<f64>>,
}

impl NamedArray {
    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Self {
        NamedArray {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.rows_vec(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let bad = |detail: String| Error::CheckpointShape {
            name: self.name.clone(),
            detail,
        };
        let [rows, cols] = self.shape[..] else {
            return Err(bad(format!(
                "shape {:?} is not two-dimensional",
                self.shape
            )));
        };
        if self.data.len() != rows {
            return Err(bad(format!(
                "shape says {rows} rows, data has {}",
                self.data.len()
            )));
        }
        if let Some(i) = self.data.iter().position(|r| r.len() != cols) {
            return Err(bad(format!(
                "shape says {cols} columns, row {i} has {}",
                self.data[i].len()
            )));
        }
        let t = Tensor::new(self.shape.clone(), self.data.concat())?;
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("array `{}`", self.name)));
        }
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CentroidDoc {
    pub values: NamedArray,
    pub accum: NamedArray,
    pub counts: Vec<u64>,
    pub last_counts: Vec<u64>,
    pub frozen: bool,
    pub epoch_stamp: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerDoc {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub m: Vec<NamedArray>,
    pub v: Vec<NamedArray>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleDoc {
    #[serde(flatten)]
    pub config: ScheduleConfig,
    pub next_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngDoc {
    pub algorithm: String,
    pub shuffle_seed: u64,
    pub epochs_drawn: usize,
}

/// The on-disk checkpoint document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: Vec<NamedArray>,
    pub centroids: CentroidDoc,
    pub optimizer: OptimizerDoc,
    pub schedule: ScheduleDoc,
    pub rng: RngDoc,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Self {
        let named = state.model.params.named();
        let moments = |ts: &[Tensor]| -> Vec<NamedArray> {
            named
                .iter()
                .zip(ts)
                .map(|((n, _), t)| NamedArray::from_tensor(n.clone(), t))
                .collect()
        };
        let c = &state.centroids;
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: state.model.config.clone(),
            params: named
                .iter()
                .map(|(n, t)| NamedArray::from_tensor(n.clone(), t))
                .collect(),
            centroids: CentroidDoc {
                values: NamedArray::from_tensor("centroids", c.centroids()),
                accum: NamedArray::from_tensor("accum", c.accum()),
                counts: c.counts().to_vec(),
                last_counts: c.last_counts().to_vec(),
                frozen: c.is_frozen(),
                epoch_stamp: c.epoch_stamp(),
            },
            optimizer: OptimizerDoc {
                beta1: state.optimizer.beta1,
                beta2: state.optimizer.beta2,
                epsilon: state.optimizer.epsilon,
                step: state.optimizer.step,
                m: moments(&state.optimizer.m),
                v: moments(&state.optimizer.v),
            },
            schedule: ScheduleDoc {
                config: state.schedule.clone(),
                next_epoch: state.epoch,
            },
            rng: RngDoc {
                algorithm: RNG_ALGORITHM.into(),
                shuffle_seed: state.shuffle_seed,
                epochs_drawn: state.epoch,
            },
        }
    }

    /// Rebuild the full training state, validating every array.
    pub fn into_state(self) -> Result<TrainState> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: self.format_version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        self.config.validate()?;
        if self.rng.algorithm != RNG_ALGORITHM {
            return Err(Error::Config(format!(
                "unknown rng algorithm `{}`",
                self.rng.algorithm
            )));
        }
        let to_named = |arrays: &[NamedArray]| -> Result<Vec<(String, Tensor)>> {
            arrays
                .iter()
                .map(|a| Ok((a.name.clone(), a.to_tensor()?)))
                .collect()
        };
        let params = ModelParams::from_named(&self.config, to_named(&self.params)?)?;
        let expected: Vec<(String, Vec<usize>)> = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let moments = |arrays: &[NamedArray], which: &str| -> Result<Vec<Tensor>> {
            if arrays.len() != expected.len() {
                return Err(Error::CheckpointShape {
                    name: format!("optimizer.{which}"),
                    detail: format!("expected {} arrays, found {}", expected.len(), arrays.len()),
                });
            }
            expected
                .iter()
                .zip(arrays)
                .map(|((name, shape), a)| {
                    let t = a.to_tensor()?;
                    if &a.name != name || t.shape() != shape.as_slice() {
                        return Err(Error::CheckpointShape {
                            name: format!("optimizer.{which}.{}", a.name),
                            detail: format!(
                                "expected `{name}` with shape {shape:?}, found shape {:?}",
                                t.shape()
                            ),
                        });
                    }
                    Ok(t)
                })
                .collect()
        };
        let optimizer = AdamState {
            beta1: self.optimizer.beta1,
            beta2: self.optimizer.beta2,
            epsilon: self.optimizer.epsilon,
            step: self.optimizer.step,
            m: moments(&self.optimizer.m, "m")?,
            v: moments(&self.optimizer.v, "v")?,
        };
        let c = &self.centroids;
        let values = c.values.to_tensor()?;
        let want = [self.config.classes, self.config.embed_dim];
        if values.shape() != want {
            return Err(Error::CheckpointShape {
                name: "centroids.values".into(),
                detail: format!(
                    "shape {:?} does not match config shape {want:?}",
                    values.shape()
                ),
            });
        }
        let accum = c.accum.to_tensor()?;
        if accum.shape() != want {
            return Err(Error::CheckpointShape {
                name: "centroids.accum".into(),
                detail: format!(
                    "shape {:?} does not match config shape {want:?}",
                    accum.shape()
                ),
            });
        }
        let centroids = CentroidTable::from_parts(
            values,
            accum,
            c.counts.clone(),
            c.last_counts.clone(),
            c.frozen,
            c.epoch_stamp,
        )
        .map_err(|e| Error::CheckpointShape {
            name: "centroids".into(),
            detail: e.to_string(),
        })?;
        self.schedule.config.validate()?;
        Ok(TrainState {
            model: Model {
                config: self.config,
                params,
            },
            centroids,
            optimizer,
            schedule: self.schedule.config,
            epoch: self.schedule.next_epoch,
            shuffle_seed: self.rng.shuffle_seed,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        // Check the version before the typed parse so a future layout is
        // reported as a version problem rather than a schema error.
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let found = raw
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Config("checkpoint has no format_version".into()))?;
        if found != u64::from(CHECKPOINT_FORMAT_VERSION) {
            return Err(Error::CheckpointVersion {
                found: u32::try_from(found).unwrap_or(u32::MAX),
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        Ok(serde_json::from_value(raw)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            ErrorKind::NotFound => Error::CheckpointMissing(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        Self::from_json(&text)
    }
}

/// Save a training state.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    Checkpoint::from_state(state).save(path)
}

/// Load and validate a training state.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    Checkpoint::load(path)?.into_state()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Merge;

    fn state() -> TrainState {
        let cfg = ModelConfig {
            d_in: 3,
            hidden: vec![4],
            embed_dim: 2,
            classes: 3,
            merge: Merge::Concat,
            seed: 9,
            scaled_attention: false,
        };
        TrainState::new(cfg, ScheduleConfig::default(), 1).unwrap()
    }

    #[test]
    fn json_round_trip() {
        let mut st = state();
        st.centroids.freeze();
        let doc = Checkpoint::from_state(&st);
        let back = Checkpoint::from_json(&doc.to_json())
            .unwrap()
            .into_state()
            .unwrap();
        assert_eq!(back, st);
        assert!(back.centroids.is_frozen());
    }

    #[test]
    fn tampered_shape_rejected() {
        let doc = Checkpoint::from_state(&state());
        let text = doc.to_json().replacen(
            "\"shape\": [\n        3,\n        4\n      ]",
            "\"shape\": [\n        4,\n        4\n      ]",
            1,
        );
        assert_ne!(text, doc.to_json(), "pattern must hit");
        let err = Checkpoint::from_json(&text)
            .unwrap()
            .into_state()
            .unwrap_err();
        assert!(matches!(err, Error::CheckpointShape { .. }), "{err}");
    }

    #[test]
    fn version_mismatch() {
        let text = Checkpoint::from_state(&state()).to_json().replacen(
            "\"format_version\": 1",
            "\"format_version\": 2",
            1,
        );
        assert!(matches!(
            Checkpoint::from_json(&text),
            Err(Error::CheckpointVersion {
                found: 2,
                expected: 1
            })
        ));
    }

    #[test]
    fn missing_file() {
        let err = Checkpoint::load(Path::new("/nonexistent/ckpt.json")).unwrap_err();
        assert!(matches!(err, Error::CheckpointMissing(_)));
    }

    #[test]
    fn config_shape_mismatch() {
        let mut doc = Checkpoint::from_state(&state());
        doc.config.embed_dim = 3;
        assert!(matches!(
            doc.into_state(),
            Err(Error::CheckpointShape { .. })
        ));
    }
}
