use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use crate::data::{
    inject_noise, load_dataset, make_synthetic, mark_unlabeled, split_counts, Dataset, NoiseKind, NoiseSpec, Split,
    SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{cce_loss_indices, one_hot, softmax, MlpParams, OptimizerConfig, OptimizerState};

/// The dataset a run trains on: loaded from `dataset_path` when set,
/// otherwise generated, split and corrupted from the config seeds. The
/// unlabeled fraction is applied last in both cases.
pub fn prepare_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    let ds = match &cfg.dataset_path {
        Some(path) => load_dataset(path)?,
        None => generate_dataset(cfg)?,
    };
    if cfg.data.unlabeled_fraction > 0.0 {
        return mark_unlabeled(&ds, cfg.data.unlabeled_fraction, cfg.seed_for("unlabeled"));
    }
    Ok(ds)
}

pub fn generate_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    let d = &cfg.data;
    let base = make_synthetic(&SyntheticSpec {
        n: d.n,
        classes: d.classes,
        dims: d.dims,
        separation: d.separation,
        seed: cfg.seed_for("data"),
    })?;
    let ds = split_counts(&base, d.meta_size, d.test_size, cfg.seed_for("split"))?;
    if d.noise.ratio == 0.0 {
        return Ok(ds);
    }
    let spec = NoiseSpec { kind: d.noise.kind, ratio: d.noise.ratio, seed: cfg.seed_for("noise") };
    let oracle = match d.noise.kind {
        NoiseKind::FeatureDependent => Some(train_oracle(cfg, &ds)?),
        NoiseKind::Uniform => None,
    };
    inject_noise(&ds, &spec, oracle.as_ref())
}

/// Network trained on the clean train labels, used to rank rows by margin.
pub fn train_oracle(cfg: &TrainConfig, ds: &Dataset) -> Result<MlpParams> {
    let dims = cfg.dims(ds.dims(), ds.classes());
    let mut theta = MlpParams::init(&dims, &mut ChaCha8Rng::seed_from_u64(cfg.seed_for("oracle")))?;
    let mut opt = OptimizerState::new(OptimizerConfig::sgd_momentum(), &theta);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed_for("oracle-shuffle"));
    let rows = ds.indices(Split::Train);
    let labels: Vec<usize> = rows.iter().map(|&i| ds.clean_label(i)).collect();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    for _ in 0..cfg.data.oracle_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.train.batch_size) {
            let idx: Vec<usize> = chunk.iter().map(|&k| rows[k]).collect();
            let y: Vec<usize> = chunk.iter().map(|&k| labels[k]).collect();
            let (grads, _) = ce_gradient(&theta, &ds.rows(&idx), &y)?;
            opt.step(&mut theta, &grads, 1e-2)?;
        }
    }
    Ok(theta)
}

/// Mean cross-entropy of `theta` on `(x, labels)` and its gradient, by
/// hand-written backprop.
pub fn ce_gradient(theta: &MlpParams, x: &Matrix, labels: &[usize]) -> Result<(Vec<Matrix>, f64)> {
    let tr = theta.trace(x)?;
    let p = softmax(tr.pre.last().expect("at least one layer"))?;
    let loss = cce_loss_indices(&p, labels)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }
    let y = one_hot(labels, theta.output_dim())?;
    let n = x.rows() as f64;
    let dz = p.probs().zip_map(&y, |a, b| (a - b) / n);
    let grads = theta.grads_from_deltas(&tr, &theta.deltas(&tr, &dz));
    Ok((grads.layers.into_iter().flat_map(|l| [l.weight, l.bias]).collect(), loss))
}
