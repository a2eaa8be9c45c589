//! Per-class centroid bookkeeping.
//!
//! During an epoch the trainer feeds detached embeddings into
//! [`CentroidTable::accumulate`]; the current centroids stay fixed. At the
//! end of the epoch [`CentroidTable::finalize_epoch`] replaces each centroid
//! with the mean of its class's accumulated embeddings. A class that was not
//! seen during the epoch keeps its previous centroid.
//!
//! A frozen table rejects both mutations. Evaluation always runs on a frozen
//! table.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidTable {
    centroids: Tensor,
    accum: Tensor,
    counts: Vec<u64>,
    /// Class counts consumed by the most recent `finalize_epoch`.
    last_counts: Vec<u64>,
    frozen: bool,
    epoch_stamp: u64,
}

impl CentroidTable {
    /// Zero centroids for `classes` classes in a `dim`-wide embedding space.
    pub fn new(classes: usize, dim: usize) -> Self {
        CentroidTable {
            centroids: Tensor::zeros(classes, dim),
            accum: Tensor::zeros(classes, dim),
            counts: vec![0; classes],
            last_counts: vec![0; classes],
            frozen: false,
            epoch_stamp: 0,
        }
    }

    /// Rebuild a table from stored parts, checking shapes and finiteness.
    pub fn from_parts(
        centroids: Tensor,
        accum: Tensor,
        counts: Vec<u64>,
        last_counts: Vec<u64>,
        frozen: bool,
        epoch_stamp: u64,
    ) -> Result<Self> {
        let m = centroids.rows();
        if centroids.rank() != 2
            || accum.shape() != centroids.shape()
            || counts.len() != m
            || last_counts.len() != m
        {
            return Err(Error::shape(
                "CentroidTable::from_parts",
                format!(
                    "centroids {:?}, accum {:?}, {} counts, {} last counts",
                    centroids.shape(),
                    accum.shape(),
                    counts.len(),
                    last_counts.len()
                ),
            ));
        }
        if !centroids.is_finite() || !accum.is_finite() {
            return Err(Error::NonFinite("centroid table".into()));
        }
        Ok(CentroidTable {
            centroids,
            accum,
            counts,
            last_counts,
            frozen,
            epoch_stamp,
        })
    }

    pub fn classes(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    /// Current centroids, one row per class.
    pub fn centroids(&self) -> &Tensor {
        &self.centroids
    }

    pub fn accum(&self) -> &Tensor {
        &self.accum
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn last_counts(&self) -> &[u64] {
        &self.last_counts
    }

    pub fn epoch_stamp(&self) -> u64 {
        self.epoch_stamp
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Add each row of `embeddings` to its class's running sum.
    pub fn accumulate(&mut self, embeddings: &Tensor, labels: &[usize]) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        if labels.is_empty() && embeddings.is_empty() {
            return Ok(());
        }
        if embeddings.rank() != 2
            || embeddings.rows() != labels.len()
            || embeddings.cols() != self.dim()
        {
            return Err(Error::shape(
                "accumulate",
                format!(
                    "embeddings {:?} with {} labels into a {}x{} table",
                    embeddings.shape(),
                    labels.len(),
                    self.classes(),
                    self.dim()
                ),
            ));
        }
        let m = self.classes();
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: m,
            });
        }
        for (i, &label) in labels.iter().enumerate() {
            for (a, &e) in self.accum.row_mut(label).iter_mut().zip(embeddings.row(i)) {
                *a += e;
            }
            self.counts[label] += 1;
        }
        Ok(())
    }

    /// Replace centroids by accumulated means and start a new epoch.
    pub fn finalize_epoch(&mut self) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        for j in 0..self.classes() {
            let s = self.counts[j];
            if s == 0 {
                continue;
            }
            let denom = s as f64;
            let sums = self.accum.row(j).to_vec();
            for (c, a) in self.centroids.row_mut(j).iter_mut().zip(sums) {
                *c = a / denom;
            }
        }
        let fresh = vec![0; self.classes()];
        self.last_counts = std::mem::replace(&mut self.counts, fresh);
        self.accum = self.accum.zeros_like();
        self.epoch_stamp += 1;
        Ok(())
    }

    /// Drop the running sums of an aborted epoch. Centroids are untouched.
    pub fn discard_accumulation(&mut self) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        self.accum = self.accum.zeros_like();
        self.counts.iter_mut().for_each(|c| *c = 0);
        Ok(())
    }

    /// Plain-text dump: a header, then one row per class with its last
    /// epoch count and centroid values.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# epoch_stamp {}\n# frozen {}\nclass\tcount",
            self.epoch_stamp, self.frozen
        );
        for d in 0..self.dim() {
            out.push_str(&format!("\te{d}"));
        }
        out.push('\n');
        for j in 0..self.classes() {
            out.push_str(&format!("{j}\t{}", self.last_counts[j]));
            for v in self.centroids.row(j) {
                out.push_str(&format!("\t{v:?}"));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulate_adds_per_class() {
        let mut t = CentroidTable::new(2, 2);
        let e = Tensor::from_rows(&[[1.0, 3.0], [3.0, 1.0]]).unwrap();
        t.accumulate(&e, &[0, 0]).unwrap();
        assert_eq!(t.accum().row(0), &[4.0, 4.0]);
        assert_eq!(t.counts(), &[2, 0]);
        assert_eq!(t.centroids(), &Tensor::zeros(2, 2));

        t.finalize_epoch().unwrap();
        assert_eq!(t.centroids().row(0), &[2.0, 2.0]);
        assert_eq!(t.counts(), &[0, 0]);
        assert_eq!(t.last_counts(), &[2, 0]);
        assert_eq!(t.accum(), &Tensor::zeros(2, 2));
        assert_eq!(t.epoch_stamp(), 1);
    }

    #[test]
    fn empty_batch_is_noop() {
        let mut t = CentroidTable::new(3, 2);
        let before = t.clone();
        t.accumulate(&Tensor::zeros(0, 2), &[]).unwrap();
        assert_eq!(t, before);
    }

    #[test]
    fn absent_class_keeps_previous_centroid() {
        let mut t = CentroidTable::new(4, 1);
        t.accumulate(
            &Tensor::from_rows(&[[1.0], [2.0], [3.0], [4.0]]).unwrap(),
            &[0, 1, 2, 3],
        )
        .unwrap();
        t.finalize_epoch().unwrap();
        t.accumulate(&Tensor::from_rows(&[[10.0]]).unwrap(), &[0])
            .unwrap();
        t.finalize_epoch().unwrap();
        assert_eq!(t.centroids().data(), &[10.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn frozen_rejects_mutation() {
        let mut t = CentroidTable::new(2, 2);
        t.freeze();
        let e = Tensor::ones(1, 2);
        assert!(matches!(t.accumulate(&e, &[0]), Err(Error::Frozen)));
        assert!(matches!(t.finalize_epoch(), Err(Error::Frozen)));
        assert!(matches!(t.discard_accumulation(), Err(Error::Frozen)));
        assert!(t.is_frozen());
    }

    #[test]
    fn label_out_of_range() {
        let mut t = CentroidTable::new(2, 2);
        let e = Tensor::ones(1, 2);
        assert!(matches!(
            t.accumulate(&e, &[2]),
            Err(Error::LabelOutOfRange {
                label: 2,
                classes: 2
            })
        ));
        assert_eq!(t.counts(), &[0, 0]);
    }

    #[test]
    fn text_dump_has_one_row_per_class() {
        let t = CentroidTable::new(3, 2);
        let text = t.to_text();
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 4);
    }
}
