//! Dataset file: one line of JSON header, then CSV with columns
//! `x_0..x_{D-1},y_clean,y_noisy,labeled,split`. Floats are written in
//! shortest round-trip form, so save/load is bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Provenance, Split};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    n: usize,
    d: usize,
    c: usize,
    #[serde(flatten)]
    provenance: Provenance,
}

pub fn write_dataset<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    let header = Header {
        format_version: DATASET_FORMAT_VERSION,
        n: dataset.len(),
        d: dataset.dims(),
        c: dataset.classes(),
        provenance: dataset.provenance.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    let mut w = csv::Writer::from_writer(out);
    let mut cols: Vec<String> = (0..dataset.dims()).map(|j| format!("x_{j}")).collect();
    cols.extend(["y_clean", "y_noisy", "labeled", "split"].map(String::from));
    w.write_record(&cols).map_err(csv_err)?;
    for i in 0..dataset.len() {
        let mut rec: Vec<String> = dataset.x().row(i).iter().map(|v| v.to_string()).collect();
        rec.push(dataset.clean_label(i).to_string());
        rec.push(dataset.stored_noisy_labels()[i].to_string());
        rec.push(if dataset.is_labeled(i) { "1" } else { "0" }.to_string());
        rec.push(dataset.split_of(i).to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("dataset csv: {e}"))
}

pub fn read_dataset<R: Read>(input: R) -> Result<Dataset> {
    let mut reader = BufReader::new(input);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let header: Header = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Format(format!("dataset header: {e}")))?;
    if header.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {}", header.format_version)));
    }
    let mut r = csv::Reader::from_reader(reader);
    let width = header.d + 4;
    if r.headers().map_err(csv_err)?.len() != width {
        return Err(Error::Format(format!("expected {width} columns")));
    }
    let mut x = Vec::with_capacity(header.n * header.d);
    let (mut y_clean, mut y_noisy, mut labeled, mut split) = (vec![], vec![], vec![], vec![]);
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = |what: &str| Error::Format(format!("row {row}: bad {what}"));
        for j in 0..header.d {
            x.push(rec[j].parse::<f64>().map_err(|_| bad("feature"))?);
        }
        y_clean.push(rec[header.d].parse().map_err(|_| bad("y_clean"))?);
        y_noisy.push(rec[header.d + 1].parse().map_err(|_| bad("y_noisy"))?);
        labeled.push(match &rec[header.d + 2] {
            "1" => true,
            "0" => false,
            _ => return Err(bad("labeled flag")),
        });
        split.push(rec[header.d + 3].parse::<Split>().map_err(|_| bad("split"))?);
    }
    if y_clean.len() != header.n {
        return Err(Error::Format(format!("header says {} rows, found {}", header.n, y_clean.len())));
    }
    Dataset::from_parts(
        Matrix::from_vec(header.n, header.d, x),
        header.c,
        y_clean,
        y_noisy,
        labeled,
        split,
        header.provenance,
    )
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    write_dataset(dataset, f)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(File::open(path)?)
}
