use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Provenance, Split};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Gaussian class blobs with unit isotropic covariance. Class `k` is
/// centred at `separation * e_k`, so the centres form a regular simplex
/// with edge length `separation * sqrt(2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub classes: usize,
    pub dims: usize,
    pub separation: f64,
    pub seed: u64,
}

pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let SyntheticSpec { n, classes, dims, separation, seed } = *spec;
    if classes < 2 {
        return Err(Error::invalid("classes", "at least 2 classes required"));
    }
    if n < classes * 10 {
        return Err(Error::invalid("n", format!("need at least {} rows for {classes} classes", classes * 10)));
    }
    if dims < classes {
        return Err(Error::invalid("dims", "simplex centres need dims >= classes"));
    }
    if !(separation.is_finite() && separation > 0.0) {
        return Err(Error::invalid("separation", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut data = Vec::with_capacity(n * dims);
    for &y in &labels {
        for d in 0..dims {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let centre = if d == y { separation } else { 0.0 };
            data.push(centre + noise);
        }
    }
    let mut ds = Dataset::new(Matrix::from_vec(n, dims, data), labels, classes)?;
    ds.provenance = Provenance {
        separation: Some(separation),
        ..Provenance::default()
    };
    ds.provenance.seeds.insert("data".into(), seed);
    Ok(ds)
}

/// Class-stratified split by fractions. Sizes are `round(N * meta)` and
/// `round(N * test)`, train takes the rest.
pub fn split(dataset: &Dataset, train: f64, meta: f64, test: f64, seed: u64) -> Result<Dataset> {
    for (name, f) in [("train_frac", train), ("meta_frac", meta), ("test_frac", test)] {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::invalid(name, format!("{f} outside [0, 1]")));
        }
    }
    if (train + meta + test - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("fractions", format!("sum to {} instead of 1", train + meta + test)));
    }
    let n = dataset.len() as f64;
    let n_meta = (n * meta).round() as usize;
    let n_test = (n * test).round() as usize;
    if n_meta + n_test > dataset.len() {
        return Err(Error::invalid("fractions", "rounded split sizes exceed the dataset"));
    }
    split_counts(dataset, n_meta, n_test, seed)
}

/// Class-stratified split with exact meta and test sizes; every remaining
/// row goes to train. Rows are ordered by proportional interleaving of
/// per-class shuffles, so any prefix is stratified within one row per class.
pub fn split_counts(dataset: &Dataset, n_meta: usize, n_test: usize, seed: u64) -> Result<Dataset> {
    if n_meta + n_test > dataset.len() {
        return Err(Error::invalid("split sizes", "meta + test exceed the dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = dataset.classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for i in 0..dataset.len() {
        by_class[dataset.clean_label(i)].push(i);
    }
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(dataset.len());
    for (k, rows) in by_class.iter_mut().enumerate() {
        rows.shuffle(&mut rng);
        let len = rows.len() as f64;
        for (r, &i) in rows.iter().enumerate() {
            keyed.push(((r as f64 + 0.5) / len, k, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut out = dataset.clone();
    for (pos, &(_, _, i)) in keyed.iter().enumerate() {
        let tag = if pos < n_meta {
            Split::Meta
        } else if pos < n_meta + n_test {
            Split::Test
        } else {
            Split::Train
        };
        out.split_mut()[i] = tag;
        if tag != Split::Train {
            // held-out rows are verified clean
            out.y_noisy_mut()[i] = dataset.clean_label(i);
            out.labeled_mut()[i] = true;
        }
    }
    out.provenance.seeds.insert("split".into(), seed);
    out.validate()?;
    Ok(out)
}
