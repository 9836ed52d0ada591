//! End-to-end training runs: data preparation, warm-up, the label-learning
//! phase, model selection, metrics, checkpoints and sweeps.

mod config;
mod metrics;
mod output;
mod prepare;
mod run;
mod sweep;

pub use config::{derive_seed, DataConfig, ModelConfig, NoiseConfig, TrainConfig, TrainingConfig, SCHEMA_VERSION};
pub use metrics::{label_stability, MetricsLog, MetricsRow, Phase, METRICS_HEADER};
pub use output::{train_to_dir, CHECKPOINT_FILE, METRICS_FILE, SUMMARY_FILE};
pub use prepare::{ce_gradient, generate_dataset, prepare_dataset, train_oracle};
pub use run::{
    baseline_ce, clone_extractor, evaluate, prediction_entropy, run_experiment, warmup_phase, Method, RunOutcome,
    RunState, Runner, Selected, Summary, CHECKPOINT_VERSION,
};
pub use sweep::{run_sweep, Axis, Cell, SweepConfig};
