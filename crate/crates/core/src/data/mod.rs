//! Labeled datasets, synthetic generation, splitting and label-noise injection.

mod io;
mod noise;
mod synth;

pub use io::{load_dataset, read_dataset, save_dataset, write_dataset};
pub use noise::{
    count_flips, counter_class, flip_quota, inject_feature_dependent, inject_noise, inject_uniform, mark_unlabeled, margins,
    NoiseKind, NoiseSpec,
};
pub use synth::{make_synthetic, split, split_counts, SyntheticSpec};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Meta,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Meta => "meta",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "meta" => Ok(Split::Meta),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid("split", format!("unknown split `{other}`"))),
        }
    }
}

/// Provenance recorded in the dataset file header.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seeds: BTreeMap<String, u64>,
    pub noise: Option<NoiseSpec>,
    pub separation: Option<f64>,
    pub unlabeled_fraction: Option<f64>,
}

/// Feature rows with clean and noisy class labels, a labeled mask and split
/// tags. Meta and test rows always keep `y_noisy == y_clean`; only train rows
/// can be unlabeled.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    x: Matrix,
    classes: usize,
    y_clean: Vec<usize>,
    y_noisy: Vec<usize>,
    labeled: Vec<bool>,
    split: Vec<Split>,
    pub provenance: Provenance,
}

impl Dataset {
    /// Builds a fully labeled, all-train dataset with `y_noisy == y_clean`.
    pub fn new(x: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let n = x.rows();
        let ds = Dataset {
            x,
            classes,
            y_noisy: labels.clone(),
            y_clean: labels,
            labeled: vec![true; n],
            split: vec![Split::Train; n],
            provenance: Provenance::default(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub(crate) fn from_parts(
        x: Matrix,
        classes: usize,
        y_clean: Vec<usize>,
        y_noisy: Vec<usize>,
        labeled: Vec<bool>,
        split: Vec<Split>,
        provenance: Provenance,
    ) -> Result<Self> {
        let ds = Dataset { x, classes, y_clean, y_noisy, labeled, split, provenance };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x.rows();
        if [self.y_clean.len(), self.y_noisy.len(), self.labeled.len(), self.split.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(Error::dims("dataset columns", n, "ragged columns"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("classes", "at least 2 classes required"));
        }
        if !self.x.is_finite() {
            return Err(Error::NonFinite("dataset features".into()));
        }
        for i in 0..n {
            if self.y_clean[i] >= self.classes || self.y_noisy[i] >= self.classes {
                return Err(Error::InvalidLabels(format!("row {i} label outside [0, {})", self.classes)));
            }
            if self.split[i] != Split::Train {
                if self.y_noisy[i] != self.y_clean[i] {
                    return Err(Error::InvalidLabels(format!("{} row {i} carries a noisy label", self.split[i])));
                }
                if !self.labeled[i] {
                    return Err(Error::InvalidLabels(format!("{} row {i} is unlabeled", self.split[i])));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> usize {
        self.x.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn split_of(&self, i: usize) -> Split {
        self.split[i]
    }

    pub fn is_labeled(&self, i: usize) -> bool {
        self.labeled[i]
    }

    /// Ground-truth label. Training code never calls this for train rows.
    pub fn clean_label(&self, i: usize) -> usize {
        self.y_clean[i]
    }

    /// The observed (possibly noisy) label. Errors for unlabeled rows.
    pub fn label(&self, i: usize) -> Result<usize> {
        if !self.labeled[i] {
            return Err(Error::UnlabeledAccess(i));
        }
        Ok(self.y_noisy[i])
    }

    /// Observed labels for a set of rows, failing on the first unlabeled one.
    pub fn labels(&self, rows: &[usize]) -> Result<Vec<usize>> {
        rows.iter().map(|&i| self.label(i)).collect()
    }

    /// Label used for scoring: clean on meta/test, observed on train.
    pub fn eval_label(&self, i: usize) -> Result<usize> {
        match self.split[i] {
            Split::Train => self.label(i),
            _ => Ok(self.y_clean[i]),
        }
    }

    /// Row indices of a split, in storage order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn labeled_indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.split[i] == split && self.labeled[i])
            .collect()
    }

    pub fn rows(&self, indices: &[usize]) -> Matrix {
        self.x.select_rows(indices)
    }

    pub fn clean_labels(&self) -> &[usize] {
        &self.y_clean
    }

    /// Raw noisy-label column, bypassing the unlabeled guard. Only for
    /// persistence and noise-rate diagnostics.
    pub fn stored_noisy_labels(&self) -> &[usize] {
        &self.y_noisy
    }

    pub fn labeled_mask(&self) -> &[bool] {
        &self.labeled
    }

    pub fn split_tags(&self) -> &[Split] {
        &self.split
    }

    /// Copy with the meta split relabeled by an arbitrary label vector.
    /// Breaks the clean-meta invariant on purpose; only used for ablations
    /// that show clean meta data matters.
    pub fn with_corrupted_meta(&self, labels_for_meta: &[usize]) -> Result<Dataset> {
        let mut out = self.clone();
        let meta = self.indices(Split::Meta);
        if meta.len() != labels_for_meta.len() {
            return Err(Error::dims("meta relabel", meta.len(), labels_for_meta.len()));
        }
        for (&i, &y) in meta.iter().zip(labels_for_meta) {
            if y >= self.classes {
                return Err(Error::InvalidLabels(format!("label {y}")));
            }
            out.y_clean[i] = y;
            out.y_noisy[i] = y;
        }
        Ok(out)
    }

    pub(crate) fn y_noisy_mut(&mut self) -> &mut Vec<usize> {
        &mut self.y_noisy
    }

    pub(crate) fn labeled_mut(&mut self) -> &mut Vec<bool> {
        &mut self.labeled
    }

    pub(crate) fn split_mut(&mut self) -> &mut Vec<Split> {
        &mut self.split
    }

    /// Reorders rows; `perm[k]` is the source row of new row `k`.
    pub fn permuted(&self, perm: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(perm),
            classes: self.classes,
            y_clean: perm.iter().map(|&i| self.y_clean[i]).collect(),
            y_noisy: perm.iter().map(|&i| self.y_noisy[i]).collect(),
            labeled: perm.iter().map(|&i| self.labeled[i]).collect(),
            split: perm.iter().map(|&i| self.split[i]).collect(),
            provenance: self.provenance.clone(),
        }
    }
}
