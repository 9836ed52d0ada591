//! Soft-label generation and the bilevel update.
//!
//! One training iteration on a batch `x` with meta batch `(x_m, y_m)`:
//!
//! 1. `v = g(x)` through the frozen extractor, `y_hat = softmax(v W + b)`.
//! 2. Virtual step `theta_hat = theta - inner_lr * grad_theta KL(f_theta(x) || y_hat)`.
//! 3. Meta loss `CE(f_theta_hat(x_m), y_m)`, differentiated w.r.t. `(W, b)`
//!    through step 2 (a gradient of a gradient), then an optimizer step on `phi`.
//! 4. The classifier is updated on `KL(f_theta(x) || y_hat')` plus the
//!    prediction entropy, with `y_hat'` regenerated from the updated `phi`.

mod similarity;

pub use similarity::{
    kl_logit_grads, meta_gradient_via_similarity, similarity_matrix, similarity_objective_gradient,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{
    cce_from_logits, cce_loss, entropy_from_logits, kl_from_logits, log_clamped, one_hot, softmax,
    Dense, MetaParams, MlpParams, MlpVars, OptimizerState, ParamSet, SoftLabels,
};
use crate::tape::{Tape, Var};

/// Which classifier activation feeds the label generator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    /// Output of the last hidden layer (the classifier with its output layer removed).
    #[default]
    Penultimate,
    /// Pre-softmax output of the full classifier copy.
    Logits,
}

/// Frozen copy of the warmed-up classifier used to encode inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    layers: Vec<Dense>,
    source: FeatureSource,
    input_dim: usize,
}

impl FeatureExtractor {
    pub fn from_classifier(theta: &MlpParams, source: FeatureSource) -> Self {
        let layers = match source {
            FeatureSource::Penultimate => theta.without_last_layer(),
            FeatureSource::Logits => theta.layers.clone(),
        };
        FeatureExtractor { layers, source, input_dim: theta.input_dim() }
    }

    pub fn source(&self) -> FeatureSource {
        self.source
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, Dense::output_dim)
    }

    pub fn extract(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim {
            return Err(Error::dims("feature extractor input", self.input_dim, x.cols()));
        }
        let mut a = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            a = a.matmul(&l.weight).add_row(&l.bias);
            let is_output = self.source == FeatureSource::Logits && i + 1 == self.layers.len();
            if !is_output {
                a = a.map(|v| v.max(0.0));
            }
        }
        Ok(a)
    }
}

pub fn generate_soft_labels(phi: &MetaParams, v: &Matrix) -> Result<SoftLabels> {
    softmax(&phi.logits(v)?)
}

/// A training batch: inputs and their extracted features. No labels.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub x: Matrix,
    pub v: Matrix,
}

impl TrainBatch {
    pub fn new(extractor: &FeatureExtractor, x: Matrix) -> Result<Self> {
        let v = extractor.extract(&x)?;
        Ok(TrainBatch { x, v })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

/// Clean labeled batch from the meta split.
#[derive(Clone, Debug)]
pub struct MetaBatch {
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub one_hot: Matrix,
}

impl MetaBatch {
    pub fn new(x: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if x.rows() != labels.len() {
            return Err(Error::dims("meta batch", x.rows(), labels.len()));
        }
        let one_hot = one_hot(&labels, classes)?;
        Ok(MetaBatch { x, labels, one_hot })
    }

    /// Gathers rows of a dataset; fails if any of them is unlabeled.
    pub fn from_rows(dataset: &crate::data::Dataset, rows: &[usize]) -> Result<Self> {
        let labels = dataset.labels(rows)?;
        MetaBatch::new(dataset.rows(rows), labels, dataset.classes())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Records `theta - inner_lr * grad_theta KL(f_theta(x) || y_hat)` on the
/// tape and returns handles to the updated parameters. The gradient is kept
/// as a recorded expression, so the result stays differentiable in whatever
/// produced `log_y_hat`.
pub fn record_virtual_update(
    tape: &mut Tape,
    theta: &MlpVars,
    x: Var,
    log_y_hat: Var,
    inner_lr: f64,
) -> Result<MlpVars> {
    let (logits, _) = theta.forward(tape, x);
    let lc = kl_from_logits(tape, logits, log_y_hat);
    let params = theta.vars();
    let grads = tape.grad(lc, &params)?;
    let updated: Vec<Var> = params
        .iter()
        .zip(&grads)
        .map(|(&p, &g)| {
            let step = tape.scale(g, inner_lr);
            tape.sub(p, step)
        })
        .collect();
    Ok(MlpVars::from_vars(&updated))
}

/// One plain gradient step of the classifier on the KL loss against `y_hat`.
pub fn virtual_update(theta: &MlpParams, x: &Matrix, y_hat: &SoftLabels, inner_lr: f64) -> Result<MlpParams> {
    if y_hat.rows() != x.rows() || y_hat.classes() != theta.output_dim() {
        return Err(Error::dims("virtual update soft labels", x.rows(), y_hat.rows()));
    }
    theta.logits(x)?;
    let mut tape = Tape::new();
    let th = theta.record(&mut tape);
    let xv = tape.constant(x.clone());
    let q = tape.constant(y_hat.probs().clone());
    let lq = log_clamped(&mut tape, q);
    let hat = record_virtual_update(&mut tape, &th, xv, lq, inner_lr)?;
    let out = hat.values(&tape);
    if !out.is_finite() {
        return Err(Error::NonFinite("virtual update".into()));
    }
    Ok(out)
}

/// Batch-mean cross-entropy of the classifier on a clean meta batch.
pub fn meta_loss(theta_hat: &MlpParams, meta: &MetaBatch) -> Result<f64> {
    let probs = softmax(&theta_hat.logits(&meta.x)?)?;
    cce_loss(&probs, &meta.one_hot)
}

#[derive(Clone, Debug)]
pub struct MetaGradient {
    pub grad: MetaParams,
    pub meta_loss: f64,
    pub y_hat: SoftLabels,
    pub theta_hat: MlpParams,
}

/// Exact gradient of the meta loss with respect to the label generator,
/// obtained by reverse-mode differentiation through the virtual update.
pub fn meta_gradient(
    phi: &MetaParams,
    theta: &MlpParams,
    batch: &TrainBatch,
    meta: &MetaBatch,
    inner_lr: f64,
) -> Result<MetaGradient> {
    check_shapes(phi, theta, batch, meta)?;
    let mut tape = Tape::new();
    let th = theta.record(&mut tape);
    let ph = phi.record(&mut tape);
    let v = tape.constant(batch.v.clone());
    let x = tape.constant(batch.x.clone());
    let z_phi = ph.logits(&mut tape, v);
    let y_hat = tape.softmax(z_phi);
    let log_y_hat = log_clamped(&mut tape, y_hat);
    let hat = record_virtual_update(&mut tape, &th, x, log_y_hat, inner_lr)?;

    let xm = tape.constant(meta.x.clone());
    let ym = tape.constant(meta.one_hot.clone());
    let (zm, _) = hat.forward(&mut tape, xm);
    let loss = cce_from_logits(&mut tape, zm, ym);
    let grads = tape.grad(loss, &ph.vars()).map_err(|e| match e {
        Error::Detached(_) => Error::SecondOrderUnavailable(
            "meta loss does not depend on the label generator through the virtual update".into(),
        ),
        other => other,
    })?;
    let grad = MetaParams {
        weight: tape.value(grads[0]).clone(),
        bias: tape.value(grads[1]).clone(),
    };
    if !grad.is_finite() {
        return Err(Error::NonFinite("meta gradient".into()));
    }
    Ok(MetaGradient {
        grad,
        meta_loss: tape.value(loss).item(),
        y_hat: SoftLabels::new(tape.value(y_hat).map(|p| p.max(f64::MIN_POSITIVE)))?,
        theta_hat: hat.values(&tape),
    })
}

fn check_shapes(phi: &MetaParams, theta: &MlpParams, batch: &TrainBatch, meta: &MetaBatch) -> Result<()> {
    if batch.v.cols() != phi.features() {
        return Err(Error::dims("label generator features", phi.features(), batch.v.cols()));
    }
    if phi.classes() != theta.output_dim() {
        return Err(Error::dims("label generator classes", theta.output_dim(), phi.classes()));
    }
    if batch.x.cols() != theta.input_dim() || meta.x.cols() != theta.input_dim() {
        return Err(Error::dims("classifier input", theta.input_dim(), batch.x.cols()));
    }
    if batch.is_empty() || meta.is_empty() {
        return Err(Error::invalid("batch", "empty batch"));
    }
    if batch.len() != meta.len() {
        return Err(Error::dims("meta batch size", batch.len(), meta.len()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaStepReport {
    pub meta_loss: f64,
    pub grad_phi_norm: f64,
    /// Batch mean of the train/meta gradient similarity matrix.
    pub mean_similarity: f64,
}

/// Updates the label generator with one optimizer step of size `beta` on
/// the meta gradient. The classifier is read but not modified.
pub fn meta_step(
    phi: &mut MetaParams,
    theta: &MlpParams,
    batch: &TrainBatch,
    meta: &MetaBatch,
    inner_lr: f64,
    beta: f64,
    opt: &mut OptimizerState,
) -> Result<MetaStepReport> {
    let mg = meta_gradient(phi, theta, batch, meta, inner_lr)?;
    let sim = similarity_matrix(theta, &mg.theta_hat, batch, &mg.y_hat, meta)?;
    let grad_phi_norm = mg.grad.flatten().iter().map(|g| g * g).sum::<f64>().sqrt();
    opt.step(phi, &[mg.grad.weight, mg.grad.bias], beta)?;
    Ok(MetaStepReport {
        meta_loss: mg.meta_loss,
        grad_phi_norm,
        mean_similarity: sim.sum() / sim.len() as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConventionalReport {
    pub classification_loss: f64,
    pub entropy_loss: f64,
}

/// Trains the classifier on labels regenerated by the (already updated)
/// label generator, plus the entropy penalty when enabled.
pub fn conventional_step(
    theta: &mut MlpParams,
    phi: &MetaParams,
    batch: &TrainBatch,
    lambda: f64,
    entropy: bool,
    opt: &mut OptimizerState,
) -> Result<ConventionalReport> {
    let y_hat = generate_soft_labels(phi, &batch.v)?;
    let (grads, report) = conventional_gradient(theta, &batch.x, &y_hat, entropy)?;
    opt.step(theta, &grads, lambda)?;
    Ok(report)
}

/// Gradient of `KL(f_theta(x) || y_hat) [+ entropy]` with respect to `theta`.
pub fn conventional_gradient(
    theta: &MlpParams,
    x: &Matrix,
    y_hat: &SoftLabels,
    entropy: bool,
) -> Result<(Vec<Matrix>, ConventionalReport)> {
    theta.logits(x)?;
    let mut tape = Tape::new();
    let th = theta.record(&mut tape);
    let xv = tape.constant(x.clone());
    let (logits, _) = th.forward(&mut tape, xv);
    let q = tape.constant(y_hat.probs().clone());
    let lq = log_clamped(&mut tape, q);
    let lc = kl_from_logits(&mut tape, logits, lq);
    let le = entropy_from_logits(&mut tape, logits);
    let total = if entropy { tape.add(lc, le) } else { lc };
    let report = ConventionalReport {
        classification_loss: tape.value(lc).item(),
        entropy_loss: tape.value(le).item(),
    };
    if !tape.value(total).is_finite() {
        return Err(Error::NonFinite("conventional loss".into()));
    }
    let grads = tape.grad(total, &th.vars())?;
    Ok((grads.iter().map(|&g| tape.value(g).clone()).collect(), report))
}
