use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::NoiseKind;
use crate::error::{Error, Result};
use crate::meta::FeatureSource;
use crate::nn::OptimizerConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Full description of one run. Every field except `schema_version` has
/// a default; unknown keys are rejected at every level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    /// Load this dataset file instead of generating one from `data`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_path: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainingConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n: usize,
    pub classes: usize,
    pub dims: usize,
    pub separation: f64,
    pub meta_size: usize,
    pub test_size: usize,
    pub noise: NoiseConfig,
    pub unlabeled_fraction: f64,
    /// Epochs for the clean-label network that ranks rows for
    /// feature-dependent noise.
    pub oracle_epochs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n: 6000,
            classes: 4,
            dims: 10,
            separation: 2.5,
            meta_size: 500,
            test_size: 500,
            noise: NoiseConfig::default(),
            unlabeled_fraction: 0.0,
            oracle_epochs: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    pub ratio: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { kind: NoiseKind::FeatureDependent, ratio: 0.4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub feature_source: FeatureSource,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { hidden: vec![32, 16], feature_source: FeatureSource::Penultimate }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub e_phase1: usize,
    /// Total epoch count, warm-up included.
    pub e_phase2: usize,
    /// `(epoch, lambda)` pairs; the value applies from that epoch onward.
    pub lr_schedule: Vec<(usize, f64)>,
    pub beta: f64,
    pub inner_lr: f64,
    pub classifier_optimizer: OptimizerConfig,
    pub label_optimizer: OptimizerConfig,
    pub entropy_loss: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 64,
            e_phase1: 15,
            e_phase2: 60,
            lr_schedule: vec![(0, 1e-2), (30, 1e-3)],
            beta: 1e-2,
            inner_lr: 1.0,
            classifier_optimizer: OptimizerConfig::sgd_momentum(),
            label_optimizer: OptimizerConfig::adaptive_moment(),
            entropy_loss: true,
        }
    }
}

impl TrainingConfig {
    /// Classifier learning rate in effect at `epoch`.
    pub fn lambda(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .take_while(|(e, _)| *e <= epoch)
            .last()
            .map_or(0.0, |&(_, v)| v)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            data: DataConfig::default(),
            dataset_path: None,
            model: ModelConfig::default(),
            train: TrainingConfig::default(),
        }
    }
}

fn check(cond: bool, field: &str, reason: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::invalid(field, reason()))
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        check(self.schema_version == SCHEMA_VERSION, "schema_version", || {
            format!("expected {SCHEMA_VERSION}, got {}", self.schema_version)
        })?;
        let d = &self.data;
        check(d.classes >= 2, "data.classes", || "need at least 2 classes".into())?;
        check(d.separation.is_finite() && d.separation > 0.0, "data.separation", || {
            format!("{} is not positive", d.separation)
        })?;
        check(d.meta_size >= 1, "data.meta_size", || "meta split is empty".into())?;
        check(d.test_size >= 1, "data.test_size", || "test split is empty".into())?;
        check(d.meta_size + d.test_size < d.n, "data.n", || {
            format!("{} rows cannot hold {} meta and {} test rows", d.n, d.meta_size, d.test_size)
        })?;
        check((0.0..1.0).contains(&d.noise.ratio), "data.noise.ratio", || {
            format!("{} outside [0, 1)", d.noise.ratio)
        })?;
        check((0.0..1.0).contains(&d.unlabeled_fraction), "data.unlabeled_fraction", || {
            format!("{} outside [0, 1)", d.unlabeled_fraction)
        })?;
        check(
            d.oracle_epochs >= 1 || d.noise.kind != NoiseKind::FeatureDependent || d.noise.ratio == 0.0,
            "data.oracle_epochs",
            || "feature-dependent noise needs a trained oracle".into(),
        )?;
        check(!self.model.hidden.is_empty(), "model.hidden", || "need at least one hidden layer".into())?;
        check(self.model.hidden.iter().all(|&h| h > 0), "model.hidden", || "zero-width layer".into())?;
        let t = &self.train;
        check(t.batch_size >= 1, "train.batch_size", || "must be positive".into())?;
        check(t.batch_size <= d.meta_size, "train.batch_size", || {
            format!("{} exceeds the meta split size {}", t.batch_size, d.meta_size)
        })?;
        check(t.e_phase1 < t.e_phase2, "train.e_phase1", || {
            format!("warm-up ({}) must end before the last epoch ({})", t.e_phase1, t.e_phase2)
        })?;
        check(t.lr_schedule.first().is_some_and(|&(e, _)| e == 0), "train.lr_schedule", || {
            "first entry must start at epoch 0".into()
        })?;
        check(t.lr_schedule.windows(2).all(|w| w[0].0 < w[1].0), "train.lr_schedule", || {
            "epochs must be strictly increasing".into()
        })?;
        check(t.lr_schedule.iter().all(|&(_, v)| v.is_finite() && v >= 0.0), "train.lr_schedule", || {
            "learning rates must be finite and non-negative".into()
        })?;
        check(t.beta.is_finite() && t.beta >= 0.0, "train.beta", || format!("{} is negative", t.beta))?;
        check(t.inner_lr.is_finite() && t.inner_lr >= 0.0, "train.inner_lr", || {
            format!("{} is negative", t.inner_lr)
        })?;
        t.classifier_optimizer.validate("train.classifier_optimizer")?;
        t.label_optimizer.validate("train.label_optimizer")?;
        Ok(())
    }

    /// Layer widths of the classifier, input to output.
    pub fn dims(&self, input: usize, classes: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(&self.model.hidden);
        dims.push(classes);
        dims
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn seed_for(&self, stream: &str) -> u64 {
        derive_seed(self.seed, stream)
    }
}

/// Independent sub-seed for a named stream of the master seed.
pub fn derive_seed(master: u64, stream: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(stream.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"))
}
