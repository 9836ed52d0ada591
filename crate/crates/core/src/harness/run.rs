use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::metrics::{label_stability, MetricsLog, MetricsRow, Phase};
use super::prepare::ce_gradient;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::matrix::{argmax, Matrix};
use crate::meta::{
    conventional_step, generate_soft_labels, meta_step, FeatureExtractor, MetaBatch, TrainBatch,
};
use crate::nn::{entropy_loss, softmax, MetaParams, MlpParams, OptimizerState};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    MetaLabelNet,
    /// Cross-entropy on the observed labels for the whole budget.
    CrossEntropy,
}

/// The model a run reports: best meta accuracy (earliest on ties) for the
/// method, the final epoch for the cross-entropy baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    pub epoch: usize,
    pub meta_acc: f64,
    pub theta: MlpParams,
    pub phi: Option<MetaParams>,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub format_version: u32,
    pub config_hash: String,
    pub method: Method,
    pub next_epoch: usize,
    pub theta: MlpParams,
    pub classifier_opt: OptimizerState,
    pub phi: Option<MetaParams>,
    pub label_opt: Option<OptimizerState>,
    pub extractor: Option<FeatureExtractor>,
    /// Label generator at the end of the previous epoch.
    pub prev_phi: Option<MetaParams>,
    pub rng: ChaCha8Rng,
    pub meta_order: Vec<usize>,
    pub meta_pos: usize,
    pub best: Option<Selected>,
    pub log: MetricsLog,
    pub elapsed: f64,
}

impl RunState {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let tmp = path.as_ref().with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(self)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let state: RunState = serde_json::from_slice(&std::fs::read(path)?)?;
        if state.format_version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("checkpoint version {}", state.format_version)));
        }
        Ok(state)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: Method,
    pub selected_epoch: usize,
    pub meta_accuracy: f64,
    pub test_accuracy: f64,
    pub last_epoch_test_accuracy: f64,
    /// Mean prediction entropy of the selected model on the test split.
    pub test_entropy: f64,
    /// The same for the model after the last epoch.
    pub last_epoch_test_entropy: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub log: MetricsLog,
    pub selected: Selected,
    pub summary: Summary,
}

/// Fraction of split rows whose argmax prediction matches the scoring label:
/// clean on meta/test, observed on labeled train rows.
pub fn evaluate(theta: &MlpParams, dataset: &Dataset, split: Split) -> Result<f64> {
    let rows = dataset.labeled_indices(split);
    if rows.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    let logits = theta.logits(&dataset.rows(&rows))?;
    let mut hits = 0;
    for (k, &i) in rows.iter().enumerate() {
        if argmax(logits.row(k)) == dataset.eval_label(i)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / rows.len() as f64)
}

/// Mean Shannon entropy of the predicted distribution over a split.
pub fn prediction_entropy(theta: &MlpParams, dataset: &Dataset, split: Split) -> Result<f64> {
    let rows = dataset.indices(split);
    if rows.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    Ok(entropy_loss(&softmax(&theta.logits(&dataset.rows(&rows))?)?))
}

/// Deep copy of the warm-up classifier used as the frozen feature map.
pub fn clone_extractor(theta: &MlpParams, cfg: &TrainConfig) -> FeatureExtractor {
    FeatureExtractor::from_classifier(theta, cfg.model.feature_source)
}

fn with_context(epoch: usize, batch: usize) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        e @ Error::Training { .. } => e,
        e => Error::Training { epoch, batch, source: Box::new(e) },
    }
}

/// Row-weighted running mean.
#[derive(Default)]
struct Mean {
    sum: f64,
    weight: f64,
}

impl Mean {
    fn add(&mut self, value: f64, weight: usize) {
        self.sum += value * weight as f64;
        self.weight += weight as f64;
    }

    fn get(&self) -> f64 {
        self.sum / self.weight
    }
}

/// Next `k` meta rows from an epoch-shuffled cycle over the meta split.
fn next_meta(state: &mut RunState, meta_rows: &[usize], k: usize) -> Vec<usize> {
    if state.meta_pos + k > state.meta_order.len() {
        state.meta_order = meta_rows.to_vec();
        state.meta_order.shuffle(&mut state.rng);
        state.meta_pos = 0;
    }
    let out = state.meta_order[state.meta_pos..state.meta_pos + k].to_vec();
    state.meta_pos += k;
    out
}

/// One training run as an epoch-at-a-time state machine.
pub struct Runner<'a> {
    cfg: &'a TrainConfig,
    ds: &'a Dataset,
    state: RunState,
    train_rows: Vec<usize>,
    labeled_train: Vec<usize>,
    meta_rows: Vec<usize>,
    train_features: Option<Matrix>,
    clock: Instant,
}

impl<'a> Runner<'a> {
    pub fn new(cfg: &'a TrainConfig, ds: &'a Dataset, method: Method) -> Result<Self> {
        cfg.validate()?;
        let dims = cfg.dims(ds.dims(), ds.classes());
        let theta = MlpParams::init(&dims, &mut ChaCha8Rng::seed_from_u64(cfg.seed_for("init")))?;
        let state = RunState {
            format_version: CHECKPOINT_VERSION,
            config_hash: cfg.hash(),
            method,
            next_epoch: 0,
            classifier_opt: OptimizerState::new(cfg.train.classifier_optimizer, &theta),
            theta,
            phi: None,
            label_opt: None,
            extractor: None,
            prev_phi: None,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed_for("run")),
            meta_order: Vec::new(),
            meta_pos: 0,
            best: None,
            log: MetricsLog::default(),
            elapsed: 0.0,
        };
        Self::with_state(cfg, ds, state)
    }

    pub fn resume(cfg: &'a TrainConfig, ds: &'a Dataset, state: RunState) -> Result<Self> {
        cfg.validate()?;
        if state.config_hash != cfg.hash() {
            return Err(Error::invalid("checkpoint", "written for a different config"));
        }
        Self::with_state(cfg, ds, state)
    }

    fn with_state(cfg: &'a TrainConfig, ds: &'a Dataset, state: RunState) -> Result<Self> {
        ds.validate()?;
        if state.theta.input_dim() != ds.dims() || state.theta.output_dim() != ds.classes() {
            return Err(Error::dims("dataset shape", state.theta.input_dim(), ds.dims()));
        }
        let labeled_train = ds.labeled_indices(Split::Train);
        if labeled_train.is_empty() {
            return Err(Error::EmptySplit("labeled train".into()));
        }
        let meta_rows = ds.indices(Split::Meta);
        if meta_rows.len() < cfg.train.batch_size {
            return Err(Error::invalid(
                "train.batch_size",
                format!("{} exceeds the meta split size {}", cfg.train.batch_size, meta_rows.len()),
            ));
        }
        if ds.indices(Split::Test).is_empty() {
            return Err(Error::EmptySplit("test".into()));
        }
        let mut runner = Runner {
            cfg,
            ds,
            train_rows: ds.indices(Split::Train),
            labeled_train,
            meta_rows,
            train_features: None,
            state,
            clock: Instant::now(),
        };
        runner.cache_features()?;
        Ok(runner)
    }

    fn cache_features(&mut self) -> Result<()> {
        if let Some(ext) = &self.state.extractor {
            self.train_features = Some(ext.extract(&self.ds.rows(&self.train_rows))?);
        }
        Ok(())
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn into_state(self) -> RunState {
        self.state
    }

    pub fn is_finished(&self) -> bool {
        self.state.next_epoch >= self.cfg.train.e_phase2
    }

    fn in_warmup(&self, epoch: usize) -> bool {
        self.state.method == Method::CrossEntropy || epoch < self.cfg.train.e_phase1
    }

    /// Runs one epoch and returns its log row.
    pub fn step_epoch(&mut self) -> Result<&MetricsRow> {
        let epoch = self.state.next_epoch;
        let lambda = self.cfg.train.lambda(epoch);
        let started = Instant::now();
        let mut row = if self.in_warmup(epoch) {
            self.ce_epoch(epoch, lambda)?
        } else {
            if self.state.extractor.is_none() {
                self.start_phase2()?;
            }
            self.meta_epoch(epoch, lambda)?
        };
        let theta = &self.state.theta;
        row.train_acc = evaluate(theta, self.ds, Split::Train)?;
        row.meta_acc = evaluate(theta, self.ds, Split::Meta)?;
        row.test_acc = evaluate(theta, self.ds, Split::Test)?;
        // plain cross-entropy never consults the meta split, so it keeps its final model
        let replace = match self.state.method {
            Method::CrossEntropy => true,
            Method::MetaLabelNet => self.state.best.as_ref().is_none_or(|b| row.meta_acc > b.meta_acc),
        };
        if replace {
            self.state.best = Some(Selected {
                epoch,
                meta_acc: row.meta_acc,
                theta: theta.clone(),
                phi: self.state.phi.clone(),
            });
        }
        self.state.elapsed += started.elapsed().as_secs_f64();
        row.wall_time = self.state.elapsed;
        self.state.next_epoch += 1;
        self.state.log.push(row);
        Ok(self.state.log.rows.last().expect("just pushed"))
    }

    fn blank_row(epoch: usize, phase: Phase, l_c: f64) -> MetricsRow {
        MetricsRow {
            epoch,
            phase,
            train_acc: 0.0,
            meta_acc: 0.0,
            test_acc: 0.0,
            l_c,
            l_e: None,
            l_meta: None,
            mean_similarity: None,
            label_stability_mean: None,
            label_stability_var: None,
            wall_time: 0.0,
        }
    }

    fn ce_epoch(&mut self, epoch: usize, lambda: f64) -> Result<MetricsRow> {
        let mut order = self.labeled_train.clone();
        order.shuffle(&mut self.state.rng);
        let mut loss = Mean::default();
        for (b, chunk) in order.chunks(self.cfg.train.batch_size).enumerate() {
            let ctx = with_context(epoch, b);
            let mut step = || -> Result<f64> {
                let labels = self.ds.labels(chunk)?;
                let (grads, l) = ce_gradient(&self.state.theta, &self.ds.rows(chunk), &labels)?;
                self.state.classifier_opt.step(&mut self.state.theta, &grads, lambda)?;
                Ok(l)
            };
            loss.add(step().map_err(ctx)?, chunk.len());
        }
        let phase = match self.state.method {
            Method::CrossEntropy => Phase::Ce,
            Method::MetaLabelNet => Phase::Warmup,
        };
        Ok(Self::blank_row(epoch, phase, loss.get()))
    }

    fn start_phase2(&mut self) -> Result<()> {
        let ext = clone_extractor(&self.state.theta, self.cfg);
        let phi = MetaParams::zeros(ext.output_dim(), self.ds.classes());
        self.state.label_opt = Some(OptimizerState::new(self.cfg.train.label_optimizer, &phi));
        self.state.prev_phi = Some(phi.clone());
        self.state.phi = Some(phi);
        self.state.extractor = Some(ext);
        self.cache_features()
    }

    fn meta_epoch(&mut self, epoch: usize, lambda: f64) -> Result<MetricsRow> {
        let t = &self.cfg.train;
        let mut order: Vec<usize> = (0..self.train_rows.len()).collect();
        order.shuffle(&mut self.state.rng);
        let (mut lc, mut le, mut lm, mut sim) = (Mean::default(), Mean::default(), Mean::default(), Mean::default());
        let features = self.train_features.as_ref().expect("phase 2 caches features");
        for (b, chunk) in order.chunks(t.batch_size).enumerate() {
            let rows: Vec<usize> = chunk.iter().map(|&k| self.train_rows[k]).collect();
            let meta_rows = next_meta(&mut self.state, &self.meta_rows, rows.len());
            let st = &mut self.state;
            let mut step = || -> Result<_> {
                let batch = TrainBatch { x: self.ds.rows(&rows), v: features.select_rows(chunk) };
                let meta = MetaBatch::from_rows(self.ds, &meta_rows)?;
                let phi = st.phi.as_mut().expect("phase 2");
                let opt = st.label_opt.as_mut().expect("phase 2");
                let m = meta_step(phi, &st.theta, &batch, &meta, t.inner_lr, t.beta, opt)?;
                let c = conventional_step(&mut st.theta, phi, &batch, lambda, t.entropy_loss, &mut st.classifier_opt)?;
                Ok((m, c))
            };
            let (m, c) = step().map_err(with_context(epoch, b))?;
            lc.add(c.classification_loss, rows.len());
            le.add(c.entropy_loss, rows.len());
            lm.add(m.meta_loss, rows.len());
            sim.add(m.mean_similarity, rows.len());
        }
        let phi = self.state.phi.as_ref().expect("phase 2");
        let prev = self.state.prev_phi.as_ref().expect("phase 2");
        let now = generate_soft_labels(phi, features)?;
        let before = generate_soft_labels(prev, features)?;
        let (s_mean, s_var) = label_stability(before.probs(), now.probs());
        self.state.prev_phi = Some(phi.clone());
        let mut row = Self::blank_row(epoch, Phase::Meta, lc.get());
        row.l_e = Some(le.get());
        row.l_meta = Some(lm.get());
        row.mean_similarity = Some(sim.get());
        row.label_stability_mean = Some(s_mean);
        row.label_stability_var = Some(s_var);
        Ok(row)
    }

    /// Runs the remaining epochs, calling `after_epoch` after each one.
    pub fn run(mut self, mut after_epoch: impl FnMut(&Runner) -> Result<()>) -> Result<RunOutcome> {
        self.clock = Instant::now();
        while !self.is_finished() {
            self.step_epoch()?;
            after_epoch(&self)?;
        }
        self.finish()
    }

    pub fn finish(self) -> Result<RunOutcome> {
        let selected = self.state.best.clone().ok_or_else(|| Error::invalid("train.e_phase2", "no epochs run"))?;
        let last = self.state.log.rows.last().expect("at least one epoch");
        let summary = Summary {
            method: self.state.method,
            selected_epoch: selected.epoch,
            meta_accuracy: selected.meta_acc,
            test_accuracy: evaluate(&selected.theta, self.ds, Split::Test)?,
            last_epoch_test_accuracy: last.test_acc,
            test_entropy: prediction_entropy(&selected.theta, self.ds, Split::Test)?,
            last_epoch_test_entropy: prediction_entropy(&self.state.theta, self.ds, Split::Test)?,
            config_hash: self.state.config_hash.clone(),
        };
        Ok(RunOutcome { log: self.state.log, selected, summary })
    }
}

/// Warm-up only: `e_phase1` epochs of cross-entropy on the labeled train rows.
pub fn warmup_phase(cfg: &TrainConfig, ds: &Dataset) -> Result<MlpParams> {
    let mut runner = Runner::new(cfg, ds, Method::MetaLabelNet)?;
    while runner.state.next_epoch < cfg.train.e_phase1 {
        runner.step_epoch()?;
    }
    Ok(runner.state.theta)
}

/// Full method: warm-up, extractor clone, then phase-2 epochs, with
/// meta-accuracy model selection over every epoch.
pub fn run_experiment(cfg: &TrainConfig, ds: &Dataset) -> Result<RunOutcome> {
    Runner::new(cfg, ds, Method::MetaLabelNet)?.run(|_| Ok(()))
}

/// Cross-entropy baseline on the same data, schedule and budget. It reports
/// its final model; the meta split only enters the log.
pub fn baseline_ce(cfg: &TrainConfig, ds: &Dataset) -> Result<RunOutcome> {
    Runner::new(cfg, ds, Method::CrossEntropy)?.run(|_| Ok(()))
}
