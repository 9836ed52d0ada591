//! Probability rows and the three training losses, both on plain values and
//! as recorded tape expressions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tape::{log_softmax_rows, Tape, Var};

/// Floor applied to soft-label entries before taking their logarithm in the
/// KL loss. Stored labels are never modified.
pub const KL_FLOOR: f64 = 1e-12;

const ROW_SUM_TOL: f64 = 1e-9;

/// `N x C` matrix whose rows are probability vectors with positive entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftLabels(Matrix);

impl SoftLabels {
    pub fn new(probs: Matrix) -> Result<Self> {
        for i in 0..probs.rows() {
            let row = probs.row(i);
            if row.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
                return Err(Error::NonPositive(format!("soft-label row {i}")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidLabels(format!("row {i} sums to {s}")));
            }
        }
        Ok(SoftLabels(probs))
    }

    /// Uniform rows `1/C`.
    pub fn uniform(rows: usize, classes: usize) -> Self {
        SoftLabels(Matrix::filled(rows, classes, 1.0 / classes as f64))
    }

    pub fn probs(&self) -> &Matrix {
        &self.0
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn classes(&self) -> usize {
        self.0.cols()
    }
}

/// Row-wise softmax. Entries that underflow are lifted to the smallest
/// positive normal so rows stay strictly positive.
pub fn softmax(logits: &Matrix) -> Result<SoftLabels> {
    if !logits.is_finite() {
        return Err(Error::NonFinite("softmax logits".into()));
    }
    let probs = log_softmax_rows(logits).map(|v| v.exp().max(f64::MIN_POSITIVE));
    Ok(SoftLabels(probs))
}

/// One-hot encoding of class indices.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(labels.len(), classes);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::InvalidLabels(format!("label {y} at row {i} outside [0, {classes})")));
        }
        m[(i, y)] = 1.0;
    }
    Ok(m)
}

fn one_hot_index(row: &[f64], i: usize) -> Result<usize> {
    let mut hot = None;
    for (j, &v) in row.iter().enumerate() {
        if v == 1.0 && hot.is_none() {
            hot = Some(j);
        } else if v != 0.0 {
            return Err(Error::InvalidLabels(format!("row {i} is not one-hot")));
        }
    }
    hot.ok_or_else(|| Error::InvalidLabels(format!("row {i} is not one-hot")))
}

fn check_batch(a: &Matrix, b: &Matrix, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dims(
            what,
            format!("{}x{}", a.rows(), a.cols()),
            format!("{}x{}", b.rows(), b.cols()),
        ));
    }
    if a.rows() == 0 {
        return Err(Error::invalid(what, "empty batch"));
    }
    Ok(())
}

/// Batch-mean categorical cross-entropy against one-hot rows.
pub fn cce_loss(probs: &SoftLabels, y: &Matrix) -> Result<f64> {
    check_batch(probs.probs(), y, "cce_loss")?;
    let mut total = 0.0;
    for i in 0..y.rows() {
        let k = one_hot_index(y.row(i), i)?;
        total -= probs.probs()[(i, k)].ln();
    }
    Ok(total / y.rows() as f64)
}

pub fn cce_loss_indices(probs: &SoftLabels, labels: &[usize]) -> Result<f64> {
    cce_loss(probs, &one_hot(labels, probs.classes())?)
}

/// Batch-mean `KL(pred || target) = sum_j pred_j ln(pred_j / target_j)`.
pub fn kl_loss(pred: &SoftLabels, target: &SoftLabels) -> Result<f64> {
    let (p, q) = (pred.probs(), target.probs());
    check_batch(p, q, "kl_loss")?;
    if p.as_slice().iter().chain(q.as_slice()).any(|&v| !(v > 0.0)) {
        return Err(Error::NonPositive("kl_loss input".into()));
    }
    let total: f64 = p
        .as_slice()
        .iter()
        .zip(q.as_slice())
        .map(|(&a, &b)| a * (a.ln() - b.max(KL_FLOOR).ln()))
        .sum();
    Ok(total / p.rows() as f64)
}

/// Batch-mean Shannon entropy of the rows.
pub fn entropy_loss(probs: &SoftLabels) -> f64 {
    let p = probs.probs();
    let total: f64 = p
        .as_slice()
        .iter()
        .map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 })
        .sum();
    total / p.rows() as f64
}

/// `ln(max(p, KL_FLOOR))` as a tape expression.
pub fn log_clamped(tape: &mut Tape, probs: Var) -> Var {
    let c = tape.clamp_min(probs, KL_FLOOR);
    tape.log(c)
}

/// Batch-mean `KL(softmax(logits) || target)` given `ln target`.
pub fn kl_from_logits(tape: &mut Tape, logits: Var, log_target: Var) -> Var {
    let lp = tape.log_softmax(logits);
    let p = tape.exp(lp);
    let diff = tape.sub(lp, log_target);
    let terms = tape.mul(p, diff);
    let rows = tape.value(logits).rows() as f64;
    let s = tape.sum(terms);
    tape.scale(s, 1.0 / rows)
}

/// Batch-mean cross-entropy of `softmax(logits)` against one-hot rows.
pub fn cce_from_logits(tape: &mut Tape, logits: Var, one_hot: Var) -> Var {
    let lp = tape.log_softmax(logits);
    let picked = tape.mul(one_hot, lp);
    let rows = tape.value(logits).rows() as f64;
    let s = tape.sum(picked);
    tape.scale(s, -1.0 / rows)
}

/// Batch-mean entropy of `softmax(logits)`.
pub fn entropy_from_logits(tape: &mut Tape, logits: Var) -> Var {
    let lp = tape.log_softmax(logits);
    let p = tape.exp(lp);
    let terms = tape.mul(p, lp);
    let rows = tape.value(logits).rows() as f64;
    let s = tape.sum(terms);
    tape.scale(s, -1.0 / rows)
}
