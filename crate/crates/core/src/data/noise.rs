//! Synthetic label corruption of the train split.
//!
//! Both injectors start from the clean labels and leave meta and test rows
//! untouched.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::matrix::argmax;
use crate::nn::{softmax, MlpParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    /// Flip to a uniformly drawn other class with probability `ratio`.
    Uniform,
    /// Flip the `ceil(ratio * N_train)` lowest-margin rows to the oracle's
    /// counter class (see [`counter_class`]).
    FeatureDependent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub ratio: f64,
    pub seed: u64,
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid("ratio", format!("{ratio} outside [0, 1]")));
    }
    Ok(())
}

pub fn inject_uniform(dataset: &Dataset, ratio: f64, seed: u64) -> Result<Dataset> {
    check_ratio(ratio)?;
    let c = dataset.classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = dataset.clone();
    for i in dataset.indices(Split::Train) {
        let y = dataset.clean_label(i);
        let mut label = y;
        if rng.random::<f64>() < ratio {
            let r = rng.random_range(0..c - 1);
            label = if r >= y { r + 1 } else { r };
        }
        out.y_noisy_mut()[i] = label;
    }
    out.provenance.noise = Some(NoiseSpec { kind: NoiseKind::Uniform, ratio, seed });
    Ok(out)
}

/// Oracle margin (top minus runner-up probability) with the top and
/// runner-up classes for each requested row.
pub fn margins(oracle: &MlpParams, dataset: &Dataset, rows: &[usize]) -> Result<Vec<(f64, usize, usize)>> {
    let probs = softmax(&oracle.logits(&dataset.rows(rows))?)?;
    let p = probs.probs();
    Ok((0..rows.len())
        .map(|r| {
            let row = p.row(r);
            let top = argmax(row);
            let mut runner = if top == 0 { 1 } else { 0 };
            for (j, &v) in row.iter().enumerate() {
                if j != top && v > row[runner] {
                    runner = j;
                }
            }
            (row[top] - row[runner], top, runner)
        })
        .collect())
}

/// Number of rows that the feature-dependent model flips.
pub fn flip_quota(ratio: f64, n_train: usize) -> usize {
    (((ratio * n_train as f64) - 1e-9).ceil().max(0.0) as usize).min(n_train)
}

/// Most probable oracle class other than the clean label: the runner-up
/// when the oracle is right, its top class when it is wrong.
pub fn counter_class((_, top, runner): (f64, usize, usize), clean: usize) -> usize {
    if top == clean {
        runner
    } else {
        top
    }
}

pub fn inject_feature_dependent(
    dataset: &Dataset,
    ratio: f64,
    oracle: &MlpParams,
    seed: u64,
) -> Result<Dataset> {
    check_ratio(ratio)?;
    if oracle.input_dim() != dataset.dims() || oracle.output_dim() != dataset.classes() {
        return Err(Error::dims(
            "noise oracle",
            format!("{} -> {}", dataset.dims(), dataset.classes()),
            format!("{} -> {}", oracle.input_dim(), oracle.output_dim()),
        ));
    }
    let train = dataset.indices(Split::Train);
    let scored = margins(oracle, dataset, &train)?;
    if scored.iter().all(|&(m, _, _)| m < 1e-12) {
        return Err(Error::DegenerateOracle("uniform predictions on every train row".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tie_keys: Vec<u64> = (0..train.len()).map(|_| rng.random()).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.sort_by(|&a, &b| {
        scored[a].0
            .total_cmp(&scored[b].0)
            .then(tie_keys[a].cmp(&tie_keys[b]))
    });

    let mut out = dataset.clone();
    for &i in &train {
        out.y_noisy_mut()[i] = dataset.clean_label(i);
    }
    for &r in order.iter().take(flip_quota(ratio, train.len())) {
        let i = train[r];
        out.y_noisy_mut()[i] = counter_class(scored[r], dataset.clean_label(i));
    }
    out.provenance.noise = Some(NoiseSpec { kind: NoiseKind::FeatureDependent, ratio, seed });
    Ok(out)
}

/// Dispatches on `spec.kind`; the feature-dependent model needs an oracle.
pub fn inject_noise(dataset: &Dataset, spec: &NoiseSpec, oracle: Option<&MlpParams>) -> Result<Dataset> {
    match spec.kind {
        NoiseKind::Uniform => inject_uniform(dataset, spec.ratio, spec.seed),
        NoiseKind::FeatureDependent => {
            let oracle = oracle.ok_or_else(|| Error::invalid("noise", "feature-dependent noise needs an oracle"))?;
            inject_feature_dependent(dataset, spec.ratio, oracle, spec.seed)
        }
    }
}

/// Hides the labels of `round(fraction * N_train)` uniformly chosen train rows.
pub fn mark_unlabeled(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid("unlabeled_fraction", format!("{fraction} outside [0, 1)")));
    }
    let mut train = dataset.indices(Split::Train);
    let count = (fraction * train.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    train.shuffle(&mut rng);
    let mut out = dataset.clone();
    for &i in &train {
        out.labeled_mut()[i] = true;
    }
    for &i in train.iter().take(count) {
        out.labeled_mut()[i] = false;
    }
    out.provenance.unlabeled_fraction = Some(fraction);
    out.provenance.seeds.insert("unlabeled".into(), seed);
    Ok(out)
}

/// Train rows whose stored label differs from the clean one.
pub fn count_flips(dataset: &Dataset) -> usize {
    dataset
        .indices(Split::Train)
        .into_iter()
        .filter(|&i| dataset.stored_noisy_labels()[i] != dataset.clean_label(i))
        .count()
}
