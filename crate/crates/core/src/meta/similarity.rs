//! Per-sample gradient similarity between train and meta rows, and the
//! meta gradient assembled from it.
//!
//! With `g_i = d l_c(f_theta(x_i), y_hat_i) / d theta` and
//! `h_j = d l_ce(f_theta_hat(x_j), y_j) / d theta_hat`, the similarity is
//! `S_ij = <g_i, h_j>`. Differentiating the virtual step shows
//!
//! `grad_phi L_meta = -(inner_lr / N_b) * d/dphi sum_i mean_j S_ij`
//!
//! with `h_j` held fixed. Everything here uses hand-written backprop and
//! forward-mode products rather than the tape, so it serves as a second,
//! independent route to the meta gradient.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{softmax, MetaParams, MlpParams, SoftLabels, KL_FLOOR};

use super::{MetaBatch, TrainBatch};

/// Per-row gradient of `KL(softmax(z_i) || q_i)` with respect to `z_i`:
/// `p_k (a_k - sum_j p_j a_j)` with `a = ln p - ln max(q, floor)`.
pub fn kl_logit_grads(p: &SoftLabels, q: &SoftLabels) -> Matrix {
    let (p, q) = (p.probs(), q.probs());
    let mut out = Matrix::zeros(p.rows(), p.cols());
    for i in 0..p.rows() {
        let a: Vec<f64> = p.row(i)
            .iter()
            .zip(q.row(i))
            .map(|(&pk, &qk)| pk.ln() - qk.max(KL_FLOOR).ln())
            .collect();
        let kl: f64 = p.row(i).iter().zip(&a).map(|(pk, ak)| pk * ak).sum();
        for (k, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = p[(i, k)] * (a[k] - kl);
        }
    }
    out
}

/// Per-row gradient of the cross-entropy w.r.t. the logits: `p - onehot`.
fn cce_logit_grads(p: &SoftLabels, one_hot: &Matrix) -> Matrix {
    p.probs().zip_map(one_hot, |a, b| a - b)
}

/// `S[i][j] = <grad of train row i's KL loss at theta, grad of meta row j's
/// cross-entropy at theta_hat>`, flattened in canonical parameter order.
///
/// Per-sample weight gradients are outer products `a_i delta_i^T`, so their
/// inner products factor into `(a_i . a_j)(delta_i . delta_j)`.
pub fn similarity_matrix(
    theta: &MlpParams,
    theta_hat: &MlpParams,
    batch: &TrainBatch,
    y_hat: &SoftLabels,
    meta: &MetaBatch,
) -> Result<Matrix> {
    if theta.dims() != theta_hat.dims() {
        return Err(Error::dims("theta_hat architecture", format!("{:?}", theta.dims()), format!("{:?}", theta_hat.dims())));
    }
    let tr = theta.trace(&batch.x)?;
    let p = softmax(tr.pre.last().expect("non-empty network"))?;
    if y_hat.rows() != p.rows() || y_hat.classes() != p.classes() {
        return Err(Error::dims("similarity soft labels", p.rows(), y_hat.rows()));
    }
    let train_deltas = theta.deltas(&tr, &kl_logit_grads(&p, y_hat));

    let tm = theta_hat.trace(&meta.x)?;
    let pm = softmax(tm.pre.last().expect("non-empty network"))?;
    let meta_deltas = theta_hat.deltas(&tm, &cce_logit_grads(&pm, &meta.one_hot));

    let mut s = Matrix::zeros(batch.len(), meta.len());
    for l in 0..theta.layers.len() {
        let dd = train_deltas[l].matmul(&meta_deltas[l].transpose());
        let aa = tr.inputs[l].matmul(&tm.inputs[l].transpose());
        // weight term (a.a')(d.d') plus bias term d.d'
        let layer = aa.zip_map(&dd, |a, d| (a + 1.0) * d);
        s = s.zip_map(&layer, |x, y| x + y);
    }
    Ok(s)
}

/// `d/dphi sum_i mean_j S_ij` with the meta-side gradients held fixed.
///
/// `sum_i mean_j S_ij = sum_i <g_i(phi), h_bar>`, and only the
/// `-sum_k ln q_ik * dp_ik/dtheta` part of `g_i` depends on `phi`, so the
/// derivative needs the forward-mode product `c_i = J_theta p_i . h_bar`.
pub fn similarity_objective_gradient(
    phi: &MetaParams,
    theta: &MlpParams,
    theta_hat: &MlpParams,
    batch: &TrainBatch,
    meta: &MetaBatch,
) -> Result<MetaParams> {
    let tm = theta_hat.trace(&meta.x)?;
    let pm = softmax(tm.pre.last().expect("non-empty network"))?;
    let dz_meta = cce_logit_grads(&pm, &meta.one_hot).scale(1.0 / meta.len() as f64);
    let h_bar = theta_hat.grads_from_deltas(&tm, &theta_hat.deltas(&tm, &dz_meta));

    let (logits, _) = theta.forward(&batch.x)?;
    let p = softmax(&logits)?;
    let tangent = theta.jvp(&batch.x, &h_bar)?;
    // c = J_softmax(t) = p * (t - p.t)
    let mut c = Matrix::zeros(p.rows(), p.classes());
    for i in 0..p.rows() {
        let pi = p.probs().row(i);
        let ti = tangent.row(i);
        let pt: f64 = pi.iter().zip(ti).map(|(a, b)| a * b).sum();
        for k in 0..p.classes() {
            c[(i, k)] = pi[k] * (ti[k] - pt);
        }
    }

    let q = softmax(&phi.logits(&batch.v)?)?;
    // objective = -sum_ik c_ik ln max(q_ik, floor); back through the floor and softmax.
    let mut dz = Matrix::zeros(q.rows(), q.classes());
    for i in 0..q.rows() {
        let qi = q.probs().row(i);
        let dq: Vec<f64> = (0..qi.len())
            .map(|k| if qi[k] > KL_FLOOR { -c[(i, k)] / qi[k] } else { 0.0 })
            .collect();
        let inner: f64 = qi.iter().zip(&dq).map(|(a, b)| a * b).sum();
        for k in 0..qi.len() {
            dz[(i, k)] = qi[k] * (dq[k] - inner);
        }
    }
    Ok(MetaParams {
        weight: batch.v.transpose().matmul(&dz),
        bias: dz.sum_rows(),
    })
}

/// Meta gradient assembled from the similarity objective:
/// `-(inner_lr / N_b) * d/dphi sum_i mean_j S_ij`.
pub fn meta_gradient_via_similarity(
    phi: &MetaParams,
    theta: &MlpParams,
    theta_hat: &MlpParams,
    batch: &TrainBatch,
    meta: &MetaBatch,
    inner_lr: f64,
) -> Result<MetaParams> {
    let d = similarity_objective_gradient(phi, theta, theta_hat, batch, meta)?;
    let k = -inner_lr / batch.len() as f64;
    Ok(MetaParams {
        weight: d.weight.scale(k),
        bias: d.bias.scale(k),
    })
}
