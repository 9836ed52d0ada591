use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::{TrainConfig, SCHEMA_VERSION};
use super::output::train_to_dir;
use super::run::{Method, Summary};
use crate::error::{Error, Result};

/// A base config plus axes of JSON-pointer overrides; cells are the
/// cartesian product with the first axis varying slowest.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub schema_version: u32,
    pub base: Value,
    pub grid: Vec<Axis>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    /// JSON pointer into the config, e.g. `/data/meta_size`.
    pub pointer: String,
    pub values: Vec<Value>,
}

#[derive(Clone, Debug)]
pub struct Cell {
    pub id: String,
    pub overrides: Vec<Value>,
    pub config: TrainConfig,
}

impl SweepConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: SweepConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid("schema_version", format!("expected {SCHEMA_VERSION}")));
        }
        Ok(cfg)
    }

    pub fn expand(&self) -> Result<Vec<Cell>> {
        let base: TrainConfig = serde_json::from_value(self.base.clone())?;
        // serialize back so every default is present for the pointers
        let base = serde_json::to_value(&base)?;
        let mut cells = Vec::new();
        let total: usize = self.grid.iter().map(|a| a.values.len()).product();
        for (a, axis) in self.grid.iter().enumerate() {
            if axis.values.is_empty() {
                return Err(Error::invalid(format!("grid[{a}].values"), "empty axis"));
            }
        }
        for k in 0..total {
            let mut rem = k;
            let mut picks = vec![0; self.grid.len()];
            for (a, axis) in self.grid.iter().enumerate().rev() {
                picks[a] = rem % axis.values.len();
                rem /= axis.values.len();
            }
            let mut value = base.clone();
            let mut overrides = Vec::new();
            for (axis, &p) in self.grid.iter().zip(&picks) {
                let slot = value
                    .pointer_mut(&axis.pointer)
                    .ok_or_else(|| Error::invalid("grid.pointer", format!("`{}` not in config", axis.pointer)))?;
                *slot = axis.values[p].clone();
                overrides.push(axis.values[p].clone());
            }
            let config: TrainConfig = serde_json::from_value(value)?;
            config.validate()?;
            cells.push(Cell { id: format!("cell_{k:03}"), overrides, config });
        }
        Ok(cells)
    }
}

/// Runs every cell into `out/<cell id>/` with up to `jobs` concurrent
/// runs, then writes `out/aggregate.csv` sorted by cell id.
pub fn run_sweep(sweep: &SweepConfig, out: &Path, jobs: usize) -> Result<Vec<(Cell, Summary)>> {
    let cells = sweep.expand()?;
    std::fs::create_dir_all(out)?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<Summary>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1).min(cells.len().max(1)) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(k) else { break };
                let r = train_to_dir(&cell.config, &out.join(&cell.id), Method::MetaLabelNet, false);
                results.lock().expect("no poisoned lock")[k] = Some(r);
            });
        }
    });
    let mut done = Vec::new();
    for (cell, r) in cells.into_iter().zip(results.into_inner().expect("no poisoned lock")) {
        let summary = r.expect("every cell ran").map_err(|e| Error::Cell { cell: cell.id.clone(), source: Box::new(e) })?;
        done.push((cell, summary));
    }
    write_aggregate(sweep, &done, &out.join("aggregate.csv"))?;
    Ok(done)
}

fn write_aggregate(sweep: &SweepConfig, done: &[(Cell, Summary)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let mut header = vec!["cell".to_string()];
    header.extend(sweep.grid.iter().map(|a| a.pointer.clone()));
    header.extend(["selected_epoch", "meta_accuracy", "test_accuracy", "last_epoch_test_accuracy"].map(String::from));
    w.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut sorted: Vec<_> = done.iter().collect();
    sorted.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    for (cell, s) in sorted {
        let mut rec = vec![cell.id.clone()];
        rec.extend(cell.overrides.iter().map(Value::to_string));
        rec.push(s.selected_epoch.to_string());
        rec.push(s.meta_accuracy.to_string());
        rec.push(s.test_accuracy.to_string());
        rec.push(s.last_epoch_test_accuracy.to_string());
        w.write_record(&rec).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
