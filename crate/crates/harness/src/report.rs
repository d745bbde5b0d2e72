//! Metric records and their CSV/JSON serialization.
//!
//! `metrics.csv` columns, in order:
//!
//! | column | meaning |
//! |---|---|
//! | `step` | optimizer step, starting at 0 |
//! | `loss` | mean cross-entropy of the step's batch |
//! | `batch_accuracy` | accuracy on the step's batch |
//! | `train_accuracy` | accuracy on the whole training set; empty when not measured |
//! | `lr` | learning rate used by the step |
//! | `wall_time` | seconds since the start of training; 0 unless recording is enabled |
//! | `attention_macs` | score and value multiplies of every attention layer, per image |
//! | `layer_macs` | the same per layer, as `name=count` pairs joined by `;` |

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

pub const METRICS_COLUMNS: [&str; 8] = [
    "step",
    "loss",
    "batch_accuracy",
    "train_accuracy",
    "lr",
    "wall_time",
    "attention_macs",
    "layer_macs",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    pub batch_accuracy: f64,
    pub train_accuracy: Option<f64>,
    pub lr: f64,
    pub wall_time: f64,
    pub attention_macs: u64,
    pub layer_macs: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub schema_version: u32,
    pub seed: u64,
    pub precision: String,
    pub records: Vec<MetricsRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

fn csv_row(r: &MetricsRecord) -> [String; 8] {
    let layers: Vec<String> = r.layer_macs.iter().map(|(k, v)| format!("{k}={v}")).collect();
    [
        r.step.to_string(),
        r.loss.to_string(),
        r.batch_accuracy.to_string(),
        r.train_accuracy.map(|a| a.to_string()).unwrap_or_default(),
        r.lr.to_string(),
        r.wall_time.to_string(),
        r.attention_macs.to_string(),
        layers.join(";"),
    ]
}

pub fn metrics_csv<W: Write>(w: W, records: &[MetricsRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(METRICS_COLUMNS)?;
    for r in records {
        out.write_record(csv_row(r))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let mut rd = csv::Reader::from_path(path)?;
    let bad = |what: &str| HarnessError::Config(format!("malformed metrics CSV: {what}"));
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        let f = |i: usize| row.get(i).ok_or_else(|| bad("short row"));
        let num = |i: usize| -> Result<f64> { f(i)?.parse().map_err(|_| bad(METRICS_COLUMNS[i])) };
        let mut layer_macs = BTreeMap::new();
        for pair in f(7)?.split(';').filter(|s| !s.is_empty()) {
            let (k, v) = pair.split_once('=').ok_or_else(|| bad("layer_macs"))?;
            layer_macs.insert(k.to_string(), v.parse().map_err(|_| bad("layer_macs"))?);
        }
        out.push(MetricsRecord {
            step: f(0)?.parse().map_err(|_| bad("step"))?,
            loss: num(1)?,
            batch_accuracy: num(2)?,
            train_accuracy: if f(3)?.is_empty() { None } else { Some(num(3)?) },
            lr: num(4)?,
            wall_time: num(5)?,
            attention_macs: f(6)?.parse().map_err(|_| bad("attention_macs"))?,
            layer_macs,
        });
    }
    Ok(out)
}

pub fn to_json<S: Serialize>(value: &S) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Writes `records` to `path` in the requested format.
pub fn emit_report(file: &MetricsFile, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match format {
        ReportFormat::Csv => metrics_csv(std::fs::File::create(path)?, &file.records),
        ReportFormat::Json => Ok(std::fs::write(path, to_json(file)?)?),
    }
}

/// Writes serializable rows with a fixed header, even when there are none.
pub fn write_table<S: Serialize>(path: impl AsRef<Path>, header: &[&str], rows: &[S]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
