use std::fs;
use std::path::Path;

use super::config::TrainConfig;
use super::prepare::prepare_dataset;
use super::run::{Method, RunState, Runner, Summary};
use crate::error::Result;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// Trains into `out`, rewriting the metrics CSV and the checkpoint after
/// every epoch so a failed run leaves its partial log behind. With
/// `resume`, continues from the checkpoint already in `out`.
pub fn train_to_dir(cfg: &TrainConfig, out: &Path, method: Method, resume: bool) -> Result<Summary> {
    fs::create_dir_all(out)?;
    let ds = prepare_dataset(cfg)?;
    let runner = if resume {
        Runner::resume(cfg, &ds, RunState::load(out.join(CHECKPOINT_FILE))?)?
    } else {
        Runner::new(cfg, &ds, method)?
    };
    fs::write(out.join("config.json"), cfg.to_json())?;
    let outcome = runner.run(|r| {
        r.state().log.save_csv(out.join(METRICS_FILE))?;
        r.state().save(out.join(CHECKPOINT_FILE))
    })?;
    outcome.log.save_csv(out.join(METRICS_FILE))?;
    let mut text = serde_json::to_string_pretty(&outcome.summary)?;
    text.push('\n');
    fs::write(out.join(SUMMARY_FILE), text)?;
    Ok(outcome.summary)
}
