use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::matrix::Matrix;

pub const METRICS_HEADER: [&str; 12] = [
    "epoch",
    "phase",
    "train_acc",
    "meta_acc",
    "test_acc",
    "l_c",
    "l_e",
    "l_meta",
    "mean_similarity",
    "label_stability_mean",
    "label_stability_var",
    "wall_time",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Meta,
    /// Cross-entropy baseline epochs.
    Ce,
}

/// One epoch of training. Fields that do not apply to the phase are `None`
/// and serialize as empty CSV cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub phase: Phase,
    pub train_acc: f64,
    pub meta_acc: f64,
    pub test_acc: f64,
    pub l_c: f64,
    pub l_e: Option<f64>,
    pub l_meta: Option<f64>,
    pub mean_similarity: Option<f64>,
    pub label_stability_mean: Option<f64>,
    pub label_stability_var: Option<f64>,
    /// Seconds since the run started; the only nondeterministic column.
    pub wall_time: f64,
}

impl MetricsRow {
    /// Equality ignoring `wall_time`.
    pub fn same_outcome(&self, other: &MetricsRow) -> bool {
        let mut a = self.clone();
        a.wall_time = other.wall_time;
        a == *other
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn push(&mut self, row: MetricsRow) {
        self.rows.push(row);
    }

    pub fn same_outcome(&self, other: &MetricsLog) -> bool {
        self.rows.len() == other.rows.len() && self.rows.iter().zip(&other.rows).all(|(a, b)| a.same_outcome(b))
    }

    pub fn phase_rows(&self, phase: Phase) -> impl Iterator<Item = &MetricsRow> {
        self.rows.iter().filter(move |r| r.phase == phase)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(METRICS_HEADER).map_err(csv_err)?;
        for row in &self.rows {
            w.serialize(row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>().map_err(csv_err)?;
        Ok(MetricsLog { rows })
    }
}

fn csv_err(e: csv::Error) -> crate::Error {
    crate::Error::Format(format!("metrics csv: {e}"))
}

/// Mean and population variance of `|current - previous|` over every entry.
pub fn label_stability(previous: &Matrix, current: &Matrix) -> (f64, f64) {
    let diffs: Vec<f64> = previous.as_slice().iter().zip(current.as_slice()).map(|(a, b)| (a - b).abs()).collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    (mean, var)
}
