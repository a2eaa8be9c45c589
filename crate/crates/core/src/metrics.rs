//! Classification metrics computed from a confusion matrix.
//!
//! `O[t][p]` counts samples of true class `t` predicted as `p`. Per-class
//! precision, recall and F1 use the convention `0/0 = 0`, and the macro
//! values are unweighted means over all `M` classes.
//!
//! Quadratic weighted kappa compares observed disagreement with the
//! disagreement expected from the marginals alone:
//!
//! ```text
//! w[i][j]  = (i - j)² / (M - 1)²
//! Ex[i][j] = rowsum_i · colsum_j / n
//! κ_w      = 1 - Σ w·O / Σ w·Ex
//! ```
//!
//! When `Σ w·Ex` is zero every sample sits in one agreed cell and
//! `κ_w = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let m = counts.len();
        if counts.iter().any(|r| r.len() != m) {
            return Err(Error::shape(
                "ConfusionMatrix::from_counts",
                "matrix must be square",
            ));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        let m = self.classes();
        (0..m)
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    /// Elementwise sum; order of merging does not matter.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(Error::shape(
                "ConfusionMatrix::merge",
                "class counts differ",
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::shape(
            "confusion",
            format!("{} predictions for {} labels", preds.len(), labels.len()),
        ));
    }
    let mut cm = ConfusionMatrix::zeros(classes);
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= classes || t >= classes {
            return Err(Error::LabelOutOfRange {
                label: p.max(t),
                classes,
            });
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BasicMetrics {
    pub accuracy: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
    pub per_class: Vec<ClassMetrics>,
}

pub fn basic_metrics(cm: &ConfusionMatrix) -> Result<BasicMetrics> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    let rows = cm.row_sums();
    let cols = cm.col_sums();
    let per_class: Vec<ClassMetrics> = (0..cm.classes())
        .map(|j| {
            let tp = cm.get(j, j) as f64;
            let precision = ratio(tp, cols[j] as f64);
            let recall = ratio(tp, rows[j] as f64);
            let f1 = ratio(2.0 * precision * recall, precision + recall);
            ClassMetrics {
                class: j,
                precision,
                recall,
                f1,
                support: rows[j],
            }
        })
        .collect();
    let m = per_class.len() as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / m;
    Ok(BasicMetrics {
        accuracy: cm.trace() as f64 / n as f64,
        precision_macro: mean(|c| c.precision),
        recall_macro: mean(|c| c.recall),
        f1_macro: mean(|c| c.f1),
        per_class,
    })
}

pub fn kappa_quadratic(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    let m = cm.classes();
    if m < 2 {
        return Err(Error::Config(
            "quadratic kappa needs at least 2 classes".into(),
        ));
    }
    let n = n as f64;
    let rows = cm.row_sums();
    let cols = cm.col_sums();
    let norm = ((m - 1) * (m - 1)) as f64;
    let mut observed = 0.0;
    let mut expected = 0.0;
    for i in 0..m {
        for j in 0..m {
            let d = i.abs_diff(j);
            if d == 0 {
                continue;
            }
            let w = (d * d) as f64 / norm;
            observed += w * cm.get(i, j) as f64;
            expected += w * (rows[i] as f64 * cols[j] as f64 / n);
        }
    }
    if expected == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - observed / expected)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub accuracy_percent: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
    pub kappa_quadratic: f64,
    pub n_samples: u64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn from_confusion(cm: ConfusionMatrix) -> Result<Self> {
        let basic = basic_metrics(&cm)?;
        let kappa = kappa_quadratic(&cm)?;
        Ok(MetricsReport {
            accuracy: basic.accuracy,
            accuracy_percent: 100.0 * basic.accuracy,
            precision_macro: basic.precision_macro,
            recall_macro: basic.recall_macro,
            f1_macro: basic.f1_macro,
            kappa_quadratic: kappa,
            n_samples: cm.total(),
            per_class: basic.per_class,
            confusion: cm,
        })
    }

    pub fn from_predictions(preds: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        Self::from_confusion(confusion(preds, labels, classes)?)
    }
}
