//! Finite-difference and cross-route gradient checks.
//!
//! Each check draws random problems, compares an analytic gradient against
//! central differences (step `1e-5`) or against the second analytic route,
//! and keeps the worst error. Entries whose magnitude is below `1e-8` on
//! both sides are compared absolutely against `1e-8`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::Result;
use crate::matrix::Matrix;
use crate::meta::{
    kl_logit_grads, meta_gradient, meta_gradient_via_similarity, virtual_update, FeatureExtractor,
    FeatureSource, MetaBatch, TrainBatch,
};
use crate::nn::{
    cce_from_logits, cce_loss, entropy_from_logits, entropy_loss, kl_from_logits, kl_loss,
    log_clamped, one_hot, softmax, MetaParams, MlpParams, ParamSet, SoftLabels,
};
use crate::tape::Tape;

pub const FD_STEP: f64 = 1e-5;
pub const SMALL: f64 = 1e-8;

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub trials: usize,
    /// Worst relative error over entries with magnitude >= `SMALL`, or the
    /// worst absolute error for route comparisons.
    pub worst_error: f64,
    pub worst_small_abs: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub trials: usize,
    pub seed: u64,
    /// Replaces every per-check relative tolerance when set.
    pub tolerance: Option<f64>,
    /// Negative control: perturbs the similarity route before comparison.
    pub corrupt_similarity_route: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { trials: 20, seed: 0, tolerance: None, corrupt_similarity_route: false }
    }
}

/// Running worst-case tracker for one check.
#[derive(Default)]
struct Worst {
    rel: f64,
    small_abs: f64,
}

impl Worst {
    fn compare(&mut self, analytic: &[f64], numeric: &[f64]) {
        assert_eq!(analytic.len(), numeric.len());
        for (&a, &n) in analytic.iter().zip(numeric) {
            let scale = a.abs().max(n.abs());
            let err = (a - n).abs();
            if scale < SMALL {
                self.small_abs = self.small_abs.max(err);
            } else {
                self.rel = self.rel.max(err / scale);
            }
        }
    }

    fn compare_abs(&mut self, a: &[f64], b: &[f64]) {
        for (&x, &y) in a.iter().zip(b) {
            self.rel = self.rel.max((x - y).abs());
        }
    }

    fn outcome(self, name: &'static str, trials: usize, tolerance: f64) -> CheckOutcome {
        CheckOutcome {
            name,
            trials,
            worst_error: self.rel,
            worst_small_abs: self.small_abs,
            tolerance,
            passed: self.rel < tolerance && self.small_abs < SMALL,
        }
    }
}

/// Central differences of `f` over every entry of `x`.
pub fn central_diff(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = probe[k];
            probe[k] = orig + FD_STEP;
            let up = f(&probe);
            probe[k] = orig - FD_STEP;
            let down = f(&probe);
            probe[k] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| { let s: f64 = StandardNormal.sample(&mut *rng); scale * s })
            .collect::<Vec<f64>>(),
    )
}

/// Xavier weights plus small random biases, so no pre-activation sits
/// exactly on a relu kink when a whole layer is inactive.
pub fn random_mlp(rng: &mut impl Rng, dims: &[usize]) -> MlpParams {
    let mut theta = MlpParams::init(dims, rng).expect("valid dims");
    for layer in &mut theta.layers {
        let cols = layer.bias.cols();
        layer.bias = normal_matrix(rng, 1, cols, 0.1);
    }
    theta
}

fn random_simplex(rng: &mut impl Rng, rows: usize, cols: usize) -> SoftLabels {
    softmax(&normal_matrix(rng, rows, cols, 1.0)).expect("finite logits")
}

fn random_labels(rng: &mut impl Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Kl,
    CrossEntropy,
    Entropy,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Kl => "kl",
            LossKind::CrossEntropy => "cross-entropy",
            LossKind::Entropy => "entropy",
        }
    }
}

struct LossTargets {
    soft: SoftLabels,
    hard: Matrix,
}

fn value_loss(kind: LossKind, logits: &Matrix, t: &LossTargets) -> f64 {
    let p = softmax(logits).expect("finite logits");
    match kind {
        LossKind::Kl => kl_loss(&p, &t.soft).expect("valid rows"),
        LossKind::CrossEntropy => cce_loss(&p, &t.hard).expect("one-hot"),
        LossKind::Entropy => entropy_loss(&p),
    }
}

fn record_loss(kind: LossKind, tape: &mut Tape, logits: crate::tape::Var, t: &LossTargets) -> crate::tape::Var {
    match kind {
        LossKind::Kl => {
            let q = tape.constant(t.soft.probs().clone());
            let lq = log_clamped(tape, q);
            kl_from_logits(tape, logits, lq)
        }
        LossKind::CrossEntropy => {
            let y = tape.constant(t.hard.clone());
            cce_from_logits(tape, logits, y)
        }
        LossKind::Entropy => entropy_from_logits(tape, logits),
    }
}

fn targets(rng: &mut impl Rng, n: usize, c: usize) -> LossTargets {
    LossTargets {
        soft: random_simplex(rng, n, c),
        hard: one_hot(&random_labels(rng, n, c), c).expect("labels in range"),
    }
}

/// Loss gradient with respect to the logits themselves.
pub fn check_loss_logits(kind: LossKind, trials: usize, seed: u64, tolerance: f64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = Worst::default();
    for _ in 0..trials {
        let (n, c) = (rng.random_range(1..5), rng.random_range(2..6));
        let z = normal_matrix(&mut rng, n, c, 1.5);
        let t = targets(&mut rng, n, c);
        let mut tape = Tape::new();
        let zv = tape.var(z.clone());
        let loss = record_loss(kind, &mut tape, zv, &t);
        let g = tape.grad(loss, &[zv]).expect("connected");
        let numeric = central_diff(z.as_slice(), |flat| {
            value_loss(kind, &Matrix::from_vec(n, c, flat.to_vec()), &t)
        });
        worst.compare(tape.value(g[0]).as_slice(), &numeric);
    }
    let name = match kind {
        LossKind::Kl => "kl-logits",
        LossKind::CrossEntropy => "cross-entropy-logits",
        LossKind::Entropy => "entropy-logits",
    };
    worst.outcome(name, trials, tolerance)
}

/// Loss gradient with respect to the parameters of a random MLP.
pub fn check_loss_params(kind: LossKind, trials: usize, seed: u64, tolerance: f64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = Worst::default();
    for _ in 0..trials {
        let c = rng.random_range(2..5);
        let dims = [rng.random_range(2..5), rng.random_range(2..6), rng.random_range(2..5), c];
        let theta = random_mlp(&mut rng, &dims);
        let n = rng.random_range(1..6);
        let x = normal_matrix(&mut rng, n, dims[0], 1.0);
        let t = targets(&mut rng, n, c);
        let mut tape = Tape::new();
        let th = theta.record(&mut tape);
        let xv = tape.constant(x.clone());
        let (z, _) = th.forward(&mut tape, xv);
        let loss = record_loss(kind, &mut tape, z, &t);
        let grads = tape.grad(loss, &th.vars()).expect("connected");
        let analytic: Vec<f64> = grads.iter().flat_map(|&g| tape.value(g).as_slice().to_vec()).collect();
        let mut probe = theta.clone();
        let numeric = central_diff(&theta.flatten(), |flat| {
            probe.assign_flat(flat).expect("same size");
            value_loss(kind, &probe.logits(&x).expect("dims"), &t)
        });
        worst.compare(&analytic, &numeric);
    }
    let name = match kind {
        LossKind::Kl => "kl-params",
        LossKind::CrossEntropy => "cross-entropy-params",
        LossKind::Entropy => "entropy-params",
    };
    worst.outcome(name, trials, tolerance)
}

/// `g(w) = ||grad_w h(w)||^2` for `h` the cross-entropy of an MLP: the
/// double-backward gradient of `g` against central differences of `g`,
/// where `g` itself is evaluated with hand-written backprop.
pub fn check_gradient_of_gradient(trials: usize, seed: u64, tolerance: f64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = Worst::default();
    for _ in 0..trials {
        let dims = [3, 4, 3];
        let theta = random_mlp(&mut rng, &dims);
        let x = normal_matrix(&mut rng, 4, 3, 1.0);
        let y = one_hot(&random_labels(&mut rng, 4, 3), 3).expect("labels");
        let mut tape = Tape::new();
        let th = theta.record(&mut tape);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let (z, _) = th.forward(&mut tape, xv);
        let h = cce_from_logits(&mut tape, z, yv);
        let g = tape.grad(h, &th.vars()).expect("connected");
        let mut sq = Vec::new();
        for &gi in &g {
            let s = tape.mul(gi, gi);
            sq.push(tape.sum(s));
        }
        let mut total = sq[0];
        for &s in &sq[1..] {
            total = tape.add(total, s);
        }
        let gg = tape.grad(total, &th.vars()).expect("second order");
        let analytic: Vec<f64> = gg.iter().flat_map(|&v| tape.value(v).as_slice().to_vec()).collect();
        let mut probe = theta.clone();
        let numeric = central_diff(&theta.flatten(), |flat| {
            probe.assign_flat(flat).expect("same size");
            let tr = probe.trace(&x).expect("dims");
            let p = softmax(tr.pre.last().expect("layers")).expect("finite");
            let dz = p.probs().zip_map(&y, |a, b| (a - b) / 4.0);
            let grad = probe.grads_from_deltas(&tr, &probe.deltas(&tr, &dz));
            grad.flatten().iter().map(|v| v * v).sum()
        });
        worst.compare(&analytic, &numeric);
    }
    worst.outcome("gradient-of-gradient", trials, tolerance)
}

/// A random instance of the small bilevel problem: input width 4, one
/// hidden layer of 3 (so 3 extracted features), 3 classes, batches of 5.
pub struct TinyProblem {
    pub theta: MlpParams,
    pub phi: MetaParams,
    pub batch: TrainBatch,
    pub meta: MetaBatch,
}

impl TinyProblem {
    pub const DIMS: [usize; 3] = [4, 3, 3];
    pub const BATCH: usize = 5;

    pub fn sample(rng: &mut impl Rng) -> Self {
        let theta = random_mlp(rng, &Self::DIMS);
        // the extractor comes from an independent warm-up network
        let warm = random_mlp(rng, &Self::DIMS);
        let extractor = FeatureExtractor::from_classifier(&warm, FeatureSource::Penultimate);
        let phi = MetaParams {
            weight: normal_matrix(rng, 3, 3, 1.0),
            bias: normal_matrix(rng, 1, 3, 0.5),
        };
        let x = normal_matrix(rng, Self::BATCH, 4, 1.0);
        let batch = TrainBatch::new(&extractor, x).expect("dims");
        let meta = MetaBatch::new(
            normal_matrix(rng, Self::BATCH, 4, 1.0),
            random_labels(rng, Self::BATCH, 3),
            3,
        )
        .expect("labels");
        TinyProblem { theta, phi, batch, meta }
    }

    /// Meta loss as a function of the label generator, evaluated without
    /// the tape: soft labels, hand-backpropagated virtual step, then CE.
    pub fn meta_loss_at(&self, phi: &MetaParams, inner_lr: f64) -> f64 {
        let q = softmax(&phi.logits(&self.batch.v).expect("dims")).expect("finite");
        let tr = self.theta.trace(&self.batch.x).expect("dims");
        let p = softmax(tr.pre.last().expect("layers")).expect("finite");
        let dz = kl_logit_grads(&p, &q).scale(1.0 / self.batch.len() as f64);
        let grad = self.theta.grads_from_deltas(&tr, &self.theta.deltas(&tr, &dz));
        let hat = self.theta.axpy(-inner_lr, &grad);
        crate::meta::meta_loss(&hat, &self.meta).expect("valid meta batch")
    }
}

/// Second-order meta gradient (tape) against central differences over phi.
pub fn check_meta_gradient(trials: usize, seed: u64, tolerance: f64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = Worst::default();
    for _ in 0..trials {
        let p = TinyProblem::sample(&mut rng);
        let mg = meta_gradient(&p.phi, &p.theta, &p.batch, &p.meta, 1.0)?;
        let mut probe = p.phi.clone();
        let numeric = central_diff(&p.phi.flatten(), |flat| {
            probe.assign_flat(flat).expect("same size");
            p.meta_loss_at(&probe, 1.0)
        });
        worst.compare(&mg.grad.flatten(), &numeric);
    }
    Ok(worst.outcome("meta-gradient", trials, tolerance))
}

/// Tape meta gradient against the similarity-route assembly (absolute error).
pub fn check_route_equivalence(trials: usize, seed: u64, tolerance: f64, corrupt: bool) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = Worst::default();
    for _ in 0..trials {
        let p = TinyProblem::sample(&mut rng);
        let inner_lr = if rng.random_bool(0.5) { 1.0 } else { rng.random_range(0.1..2.0) };
        let mg = meta_gradient(&p.phi, &p.theta, &p.batch, &p.meta, inner_lr)?;
        let mut alt = meta_gradient_via_similarity(&p.phi, &p.theta, &mg.theta_hat, &p.batch, &p.meta, inner_lr)?;
        if corrupt {
            alt.bias[(0, 0)] += 1e-3;
        }
        worst.compare_abs(&mg.grad.flatten(), &alt.flatten());
    }
    Ok(worst.outcome("route-equivalence", trials, tolerance))
}

/// Virtual step against `theta - lr * (finite-difference gradient)`.
pub fn check_virtual_update(trials: usize, seed: u64, tolerance: f64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = Worst::default();
    for _ in 0..trials {
        let p = TinyProblem::sample(&mut rng);
        let q = softmax(&p.phi.logits(&p.batch.v)?)?;
        let lr = rng.random_range(0.1..1.5);
        let hat = virtual_update(&p.theta, &p.batch.x, &q, lr)?;
        let mut probe = p.theta.clone();
        let fd = central_diff(&p.theta.flatten(), |flat| {
            probe.assign_flat(flat).expect("same size");
            let pr = softmax(&probe.logits(&p.batch.x).expect("dims")).expect("finite");
            kl_loss(&pr, &q).expect("valid")
        });
        // compare the step itself, theta - theta_hat, against lr * fd
        let step: Vec<f64> = p.theta.flatten().iter().zip(hat.flatten()).map(|(a, b)| a - b).collect();
        let expected: Vec<f64> = fd.iter().map(|g| lr * g).collect();
        worst.compare(&step, &expected);
    }
    Ok(worst.outcome("virtual-update", trials, tolerance))
}

/// Classifier gradient of KL + entropy against central differences.
pub fn check_conventional_gradient(trials: usize, seed: u64, tolerance: f64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = Worst::default();
    for _ in 0..trials {
        let p = TinyProblem::sample(&mut rng);
        let q = softmax(&p.phi.logits(&p.batch.v)?)?;
        let (grads, _) = crate::meta::conventional_gradient(&p.theta, &p.batch.x, &q, true)?;
        let analytic: Vec<f64> = grads.iter().flat_map(|g| g.as_slice().to_vec()).collect();
        let mut probe = p.theta.clone();
        let numeric = central_diff(&p.theta.flatten(), |flat| {
            probe.assign_flat(flat).expect("same size");
            let pr = softmax(&probe.logits(&p.batch.x).expect("dims")).expect("finite");
            kl_loss(&pr, &q).expect("valid") + entropy_loss(&pr)
        });
        worst.compare(&analytic, &numeric);
    }
    Ok(worst.outcome("conventional-gradient", trials, tolerance))
}

/// Runs every check. Relative tolerances: 1e-6 on logit gradients, 1e-4 on
/// parameter and meta gradients, 1e-5 on gradient-of-gradient; the route
/// comparison is absolute at 1e-6.
pub fn run_suite(opts: &GradcheckOptions) -> Result<Vec<CheckOutcome>> {
    let tol = |default: f64| opts.tolerance.unwrap_or(default);
    let (t, s) = (opts.trials, opts.seed);
    let mut out = Vec::new();
    for (k, kind) in [LossKind::Kl, LossKind::CrossEntropy, LossKind::Entropy].into_iter().enumerate() {
        out.push(check_loss_logits(kind, t, s.wrapping_add(k as u64), tol(1e-6)));
        out.push(check_loss_params(kind, t, s.wrapping_add(10 + k as u64), tol(1e-4)));
    }
    out.push(check_gradient_of_gradient(t, s.wrapping_add(20), tol(1e-5)));
    out.push(check_virtual_update(t, s.wrapping_add(21), tol(1e-4))?);
    out.push(check_conventional_gradient(t, s.wrapping_add(22), tol(1e-4))?);
    out.push(check_meta_gradient(t, s.wrapping_add(23), tol(1e-4))?);
    out.push(check_route_equivalence(t, s.wrapping_add(24), 1e-6, opts.corrupt_similarity_route)?);
    Ok(out)
}
