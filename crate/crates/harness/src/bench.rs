use std::path::Path;

use clustr_core::attention::{attention_macs, projection_macs, AttentionSpec, Session};
use clustr_core::model::{build_model, ModelConfig};
use clustr_core::numerics::{Real, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Precision, RunConfig};
use crate::dataset::{stream_rng, DATA_STREAM};
use crate::error::{HarnessError, Result};
use crate::report::{to_json, write_table};

pub const BENCH_SCHEMA_VERSION: u32 = 1;

pub const BENCH_COLUMNS: [&str; 14] = [
    "resolution",
    "stage",
    "layer",
    "tokens",
    "channels",
    "heads",
    "lambdas",
    "kv_tokens",
    "measured_macs",
    "analytic_macs",
    "dense_macs",
    "projection_macs",
    "clustered_over_dense",
    "measured_equals_analytic",
];

/// One attention layer at one input resolution. List-valued fields are
/// `;`-joined so rows stay flat in CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub resolution: usize,
    pub stage: usize,
    pub layer: String,
    pub tokens: usize,
    pub channels: usize,
    pub heads: usize,
    pub lambdas: String,
    pub kv_tokens: String,
    pub measured_macs: u64,
    pub analytic_macs: u64,
    pub dense_macs: u64,
    pub projection_macs: u64,
    pub clustered_over_dense: f64,
    pub measured_equals_analytic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub variant: String,
    pub precision: String,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn all_match(&self) -> bool {
        self.rows.iter().all(|r| r.measured_equals_analytic)
    }
}

fn join<D: ToString>(xs: &[D]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(";")
}

/// Runs one instrumented forward pass per resolution and sets the measured
/// attention multiplies of every layer beside the analytic and dense counts.
pub fn bench_complexity<T: Real>(cfg: &ModelConfig, resolutions: &[usize], seed: u64) -> Result<BenchReport> {
    if resolutions.is_empty() {
        return Err(HarnessError::Config("no resolutions to benchmark".into()));
    }
    if let Some(r) = resolutions.iter().find(|&&r| r == 0 || r % 32 != 0) {
        return Err(HarnessError::Config(format!("resolution {r} is not a positive multiple of 32")));
    }
    let mut model = build_model::<T>(cfg, seed)?;
    let mut rng = stream_rng(seed, DATA_STREAM);
    let mut rows = Vec::new();
    for &res in resolutions {
        model.config.input_resolution = res;
        let c = cfg.in_channels;
        let image = Tensor::new(vec![res, res, c], (0..res * res * c).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect())?;
        let mut s = Session::new(&model.params);
        model.forward_image(&mut s, &image)?;
        for t in &s.traces {
            let stage = t.layer.strip_prefix("stage").and_then(|r| r.split('.').next()).and_then(|n| n.parse().ok()).unwrap_or(0);
            let spec = AttentionSpec::new(t.channels, t.heads, t.lambdas.clone())?;
            let analytic = attention_macs(t.tokens, &spec);
            rows.push(BenchRow {
                resolution: res,
                stage,
                layer: t.layer.clone(),
                tokens: t.tokens,
                channels: t.channels,
                heads: t.heads,
                lambdas: join(&t.lambdas),
                kv_tokens: join(&t.kv_tokens),
                measured_macs: t.measured_macs,
                analytic_macs: analytic.clustered,
                dense_macs: analytic.dense,
                projection_macs: projection_macs(t.tokens, &spec),
                clustered_over_dense: analytic.clustered as f64 / analytic.dense as f64,
                measured_equals_analytic: t.measured_macs == analytic.clustered && t.kv_tokens == analytic.kv_tokens,
            });
        }
    }
    Ok(BenchReport {
        schema_version: BENCH_SCHEMA_VERSION,
        variant: cfg.variant.clone(),
        precision: T::NAME.to_string(),
        rows,
    })
}

/// `bench_complexity` for a run config; writes `bench.json` and `bench.csv`.
pub fn bench_run(run: &RunConfig, out: &Path) -> Result<BenchReport> {
    let cfg = run.model_config()?;
    let report = match run.precision {
        Precision::F32 => bench_complexity::<f32>(&cfg, &run.bench.resolutions, run.seed)?,
        Precision::F64 => bench_complexity::<f64>(&cfg, &run.bench.resolutions, run.seed)?,
    };
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("bench.json"), to_json(&report)?)?;
    write_table(out.join("bench.csv"), &BENCH_COLUMNS, &report.rows)?;
    Ok(report)
}
