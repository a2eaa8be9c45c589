//! Labeled vector datasets: a synthetic Gaussian generator with a
//! controllable shift, CSV storage, and mini-batching.
//!
//! The generator draws four splits. `train`, `val` and `test_i` share one
//! law, `x = μ_j + σ_j·z`. `test_ii` is drawn from a shifted law,
//! `x = (μ_j + δ) + γ·σ_j·z`. Each split has its own named random stream,
//! so changing one split's size never changes another split's samples.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const SPEC_FORMAT_VERSION: u32 = 1;

/// Training-split class ratios of the four-class `skewed` preset.
pub const SKEWED_TRAIN_RATIOS: [u64; 4] = [773, 1866, 2997, 1391];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    TestI,
    TestIi,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::TestI, Split::TestIi];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestI => "test_i",
            Split::TestIi => "test_ii",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test_i: usize,
    pub test_ii: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::TestI => self.test_i,
            Split::TestIi => self.test_ii,
        }
    }
}

/// How a split's total is divided among classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Balance {
    #[default]
    Balanced,
    /// Training split follows [`SKEWED_TRAIN_RATIOS`]; other splits stay
    /// balanced. Requires four classes.
    Skewed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shift {
    /// Mean offset `δ`, length `d_in`.
    pub offset: Vec<f64>,
    /// Spread multiplier `γ > 0`.
    pub spread_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default = "spec_version")]
    pub format_version: u32,
    pub d_in: usize,
    pub classes: usize,
    /// One mean vector per class.
    pub means: Vec<Vec<f64>>,
    /// Isotropic standard deviation per class.
    pub spread: Vec<f64>,
    pub counts: SplitCounts,
    #[serde(default)]
    pub balance: Balance,
    pub shift: Shift,
    pub seed: u64,
}

fn spec_version() -> u32 {
    SPEC_FORMAT_VERSION
}

impl DatasetSpec {
    /// Well-separated blobs: class `j` is centred at `a·e_j` with
    /// `a = separation/√2`, so every pair of means is exactly `separation`
    /// apart. Needs `classes <= d_in`. No shift.
    pub fn gaussian_blobs(
        d_in: usize,
        classes: usize,
        separation: f64,
        sigma: f64,
        counts: SplitCounts,
        seed: u64,
    ) -> Result<Self> {
        if classes > d_in {
            return Err(Error::Config(format!(
                "gaussian_blobs places {classes} means on distinct axes of a {d_in}-dimensional space"
            )));
        }
        let a = separation / std::f64::consts::SQRT_2;
        let means = (0..classes)
            .map(|j| {
                let mut m = vec![0.0; d_in];
                m[j] = a;
                m
            })
            .collect();
        let spec = DatasetSpec {
            format_version: SPEC_FORMAT_VERSION,
            d_in,
            classes,
            means,
            spread: vec![sigma; classes],
            counts,
            balance: Balance::Balanced,
            shift: Shift {
                offset: vec![0.0; d_in],
                spread_scale: 1.0,
            },
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Set the shift to `magnitude` along a random unit direction drawn
    /// from `direction_seed`, with spread multiplier `spread_scale`.
    pub fn with_random_shift(
        mut self,
        magnitude: f64,
        spread_scale: f64,
        direction_seed: u64,
    ) -> Self {
        let mut rng = SplitMix64::stream(direction_seed, "shift-direction");
        let mut dir: Vec<f64> = (0..self.d_in).map(|_| rng.normal()).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut dir {
            *v *= magnitude / norm;
        }
        self.shift = Shift {
            offset: dir,
            spread_scale,
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != SPEC_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "format_version {} is not supported (expected {SPEC_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.classes == 0 {
            return Err(Error::Config("classes must be at least 1".into()));
        }
        if self.d_in == 0 {
            return Err(Error::Config("d_in must be at least 1".into()));
        }
        if self.means.len() != self.classes {
            return Err(Error::Config(format!(
                "means has {} rows for {} classes",
                self.means.len(),
                self.classes
            )));
        }
        if let Some(j) = self.means.iter().position(|m| m.len() != self.d_in) {
            return Err(Error::Config(format!(
                "means[{j}] must have length d_in = {}",
                self.d_in
            )));
        }
        if self.means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("means must be finite".into()));
        }
        if self.spread.len() != self.classes {
            return Err(Error::Config(format!(
                "spread has {} entries for {} classes",
                self.spread.len(),
                self.classes
            )));
        }
        if let Some(j) = self
            .spread
            .iter()
            .position(|&s| !(s > 0.0 && s.is_finite()))
        {
            return Err(Error::Config(format!(
                "spread[{j}] must be positive and finite"
            )));
        }
        if self.shift.offset.len() != self.d_in {
            return Err(Error::Config(format!(
                "shift.offset must have length d_in = {}",
                self.d_in
            )));
        }
        if self.shift.offset.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("shift.offset must be finite".into()));
        }
        if !(self.shift.spread_scale > 0.0 && self.shift.spread_scale.is_finite()) {
            return Err(Error::Config("shift.spread_scale must be positive".into()));
        }
        if self.balance == Balance::Skewed && self.classes != SKEWED_TRAIN_RATIOS.len() {
            return Err(Error::Config("balance skewed requires 4 classes".into()));
        }
        Ok(())
    }

    /// Samples per class for one split.
    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let total = self.counts.get(split);
        match (self.balance, split) {
            (Balance::Skewed, Split::Train) => apportion(total, &SKEWED_TRAIN_RATIOS),
            _ => apportion(total, &vec![1; self.classes]),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: DatasetSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }
}

/// Largest-remainder split of `total` in proportion to `weights`; leftover
/// units go to the largest remainders, ties to the lower class.
fn apportion(total: usize, weights: &[u64]) -> Vec<usize> {
    let sum: u64 = weights.iter().sum();
    let total = total as u64;
    let mut counts: Vec<u64> = weights.iter().map(|w| total * w / sum).collect();
    let mut rem: Vec<(u64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(j, w)| (total * w % sum, j))
        .collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let left = total - counts.iter().sum::<u64>();
    for &(_, j) in rem.iter().take(left as usize) {
        counts[j] += 1;
    }
    counts.into_iter().map(|c| c as usize).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub split: Option<Split>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>) -> Result<Self> {
        if features.rank() != 2 || features.rows() != labels.len() {
            return Err(Error::shape(
                "Dataset::new",
                format!(
                    "features {:?} with {} labels",
                    features.shape(),
                    labels.len()
                ),
            ));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("dataset features".into()));
        }
        Ok(Dataset {
            features,
            labels,
            split: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.features.cols()
    }

    /// Count of each label in `0..classes`.
    pub fn histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &l in &self.labels {
            if l < classes {
                h[l] += 1;
            }
        }
        h
    }

    /// Rows reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(order),
            labels: order.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        }
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let mut header: Vec<String> = (0..self.d_in()).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(|e| csv_io(path, e))?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self
                .features
                .row(i)
                .iter()
                .map(|v| format!("{v:?}"))
                .collect();
            rec.push(self.labels[i].to_string());
            w.write_record(&rec).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(file);
        let err = |line: u64, message: String| Error::Csv {
            path: path.to_path_buf(),
            line: line as usize,
            message,
        };
        let header = r.headers().map_err(|e| err(1, e.to_string()))?.clone();
        let cols = header.len();
        if cols < 2 {
            return Err(err(
                1,
                "header needs at least one feature column and `label`".into(),
            ));
        }
        for (i, name) in header.iter().take(cols - 1).enumerate() {
            if name.trim() != format!("f{i}") {
                return Err(err(1, format!("column {i} is `{name}`, expected `f{i}`")));
            }
        }
        if header.get(cols - 1).map(str::trim) != Some("label") {
            return Err(err(1, "last column must be `label`".into()));
        }
        let d_in = cols - 1;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                err(line, e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != cols {
                return Err(err(
                    line,
                    format!("expected {cols} fields, found {}", rec.len()),
                ));
            }
            for (i, field) in rec.iter().take(d_in).enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| err(line, format!("f{i} value `{field}` is not a number")))?;
                if !v.is_finite() {
                    return Err(err(line, format!("f{i} value `{field}` is not finite")));
                }
                data.push(v);
            }
            let field = &rec[d_in];
            let label: usize = field.trim().parse().map_err(|_| {
                err(
                    line,
                    format!("label `{field}` is not a nonnegative integer"),
                )
            })?;
            labels.push(label);
        }
        let features = Tensor::new(vec![labels.len(), d_in], data)?;
        Dataset::new(features, labels)
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// The four generated splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test_i: Dataset,
    pub test_ii: Dataset,
}

impl Splits {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::TestI => &self.test_i,
            Split::TestIi => &self.test_ii,
        }
    }
}

fn gen_split(spec: &DatasetSpec, split: Split) -> Dataset {
    let mut rng = SplitMix64::stream(spec.seed, split.name());
    let shifted = split == Split::TestIi;
    let counts = spec.class_counts(split);
    let n: usize = counts.iter().sum();
    let mut data = Vec::with_capacity(n * spec.d_in);
    let mut labels = Vec::with_capacity(n);
    for (j, &count) in counts.iter().enumerate() {
        let sigma = if shifted {
            spec.spread[j] * spec.shift.spread_scale
        } else {
            spec.spread[j]
        };
        for _ in 0..count {
            for k in 0..spec.d_in {
                let mu = if shifted {
                    spec.means[j][k] + spec.shift.offset[k]
                } else {
                    spec.means[j][k]
                };
                data.push(mu + sigma * rng.normal());
            }
            labels.push(j);
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::stream(spec.seed, &format!("{}/order", split.name())).shuffle(&mut order);
    let ds = Dataset {
        features: Tensor::new(vec![n, spec.d_in], data).expect("sized above"),
        labels,
        split: Some(split),
    };
    ds.permuted(&order)
}

pub fn gen_synthetic(spec: &DatasetSpec) -> Result<Splits> {
    spec.validate()?;
    Ok(Splits {
        train: gen_split(spec, Split::Train),
        val: gen_split(spec, Split::Val),
        test_i: gen_split(spec, Split::TestI),
        test_ii: gen_split(spec, Split::TestIi),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<usize>,
    /// Dataset row of each batch row.
    pub indices: Vec<usize>,
}

/// Consecutive batches of `batch_size` rows; the last one may be short.
/// With `shuffle`, rows are visited in a permutation drawn from `seed`.
pub fn batches(dataset: &Dataset, batch_size: usize, seed: u64, shuffle: bool) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if shuffle {
        SplitMix64::stream(seed, "batches").shuffle(&mut order);
    }
    order
        .chunks(batch_size)
        .map(|idx| Batch {
            features: dataset.features.select_rows(idx),
            labels: idx.iter().map(|&i| dataset.labels[i]).collect(),
            indices: idx.to_vec(),
        })
        .collect()
}
