use std::path::Path;

use clustr_core::attention::Aggregation;
use clustr_core::model::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::config::{AblationAxis, Precision, RunConfig};
use crate::dataset::Dataset;
use crate::error::{HarnessError, Result};
use crate::report::{to_json, write_table};
use crate::train::{train, TrainOutcome};

pub const ABLATION_SCHEMA_VERSION: u32 = 1;

pub const ARM_COLUMNS: [&str; 12] = [
    "axis",
    "pair",
    "arm",
    "seed",
    "steps",
    "batch_size",
    "lr",
    "params",
    "attention_macs",
    "kv_tokens",
    "final_loss",
    "final_train_accuracy",
];

/// One row of the paired table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRow {
    pub axis: String,
    pub pair: String,
    pub arm: String,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub params: usize,
    pub attention_macs: u64,
    pub kv_tokens: u64,
    pub final_loss: f64,
    pub final_train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub pair: String,
    pub arms: [String; 2],
    /// Largest per-step loss difference between the two arms.
    pub max_loss_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisReport {
    pub axis: String,
    pub rows: Vec<ArmRow>,
    pub pairs: Vec<PairSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub axes: Vec<AxisReport>,
}

struct Arm {
    pair: &'static str,
    name: &'static str,
    config: ModelConfig,
}

fn with_aggregation(cfg: &ModelConfig, agg: Aggregation) -> ModelConfig {
    let mut c = cfg.clone();
    c.aggregation = agg;
    c
}

fn unit_ratios(cfg: &ModelConfig) -> ModelConfig {
    let ones = vec![vec![1.0]; cfg.stages.len()];
    cfg.clone().with_lambdas(&ones)
}

fn arms(run: &RunConfig, base: &ModelConfig, axis: AblationAxis) -> Result<Vec<Arm>> {
    let mut out = Vec::new();
    match axis {
        AblationAxis::GridVsCluster => {
            out.push(Arm { pair: "main", name: "grid", config: with_aggregation(base, Aggregation::Grid) });
            out.push(Arm { pair: "main", name: "cluster", config: with_aggregation(base, Aggregation::Cluster) });
            if run.ablate.control {
                let unit = unit_ratios(base);
                out.push(Arm { pair: "control", name: "grid_r1", config: with_aggregation(&unit, Aggregation::Grid) });
                out.push(Arm { pair: "control", name: "cluster_l1", config: with_aggregation(&unit, Aggregation::Cluster) });
            }
        }
        AblationAxis::SingleVsMultiScale => {
            let single = match &run.ablate.single_lambdas {
                Some(l) if l.len() == base.stages.len() => l.clone(),
                Some(l) => {
                    return Err(HarnessError::Config(format!(
                        "single_lambdas has {} stages, the model has {}",
                        l.len(),
                        base.stages.len()
                    )))
                }
                None => base.stages.iter().map(|s| vec![s.lambdas[0]]).collect(),
            };
            out.push(Arm { pair: "main", name: "single", config: base.clone().with_lambdas(&single) });
            out.push(Arm { pair: "main", name: "multi", config: base.clone() });
        }
    }
    for a in &out {
        a.config.validate()?;
    }
    Ok(out)
}

fn run_arm(run: &RunConfig, cfg: &ModelConfig, data: &Dataset, out: &Path) -> Result<TrainOutcome> {
    match run.precision {
        Precision::F32 => train::<f32>(run, cfg, data, Some(out)),
        Precision::F64 => train::<f64>(run, cfg, data, Some(out)),
    }
}

fn max_loss_diff(a: &TrainOutcome, b: &TrainOutcome) -> f64 {
    if a.records.len() != b.records.len() {
        return f64::INFINITY;
    }
    a.records.iter().zip(&b.records).map(|(x, y)| (x.loss - y.loss).abs()).fold(0.0, f64::max)
}

/// Trains every arm of one axis on the same data, seed and schedule, and
/// writes `<axis>.csv`, `<axis>_curves.csv` and one directory per arm.
pub fn ablate_axis(run: &RunConfig, base: &ModelConfig, data: &Dataset, axis: AblationAxis, out: &Path) -> Result<AxisReport> {
    let arms = arms(run, base, axis)?;
    let dir = out.join(axis.name());
    std::fs::create_dir_all(&dir)?;
    let mut outcomes = Vec::with_capacity(arms.len());
    for arm in &arms {
        outcomes.push(run_arm(run, &arm.config, data, &dir.join(arm.name))?);
    }
    let rows: Vec<ArmRow> = arms
        .iter()
        .zip(&outcomes)
        .map(|(a, o)| ArmRow {
            axis: axis.name().to_string(),
            pair: a.pair.to_string(),
            arm: a.name.to_string(),
            seed: run.seed,
            steps: o.summary.steps_run,
            batch_size: run.optimizer.batch_size,
            lr: run.optimizer.lr,
            params: o.summary.params,
            attention_macs: o.summary.attention_macs,
            kv_tokens: o.summary.kv_tokens,
            final_loss: o.summary.final_loss,
            final_train_accuracy: o.summary.final_train_accuracy,
        })
        .collect();
    let mut pairs = Vec::new();
    for i in (0..arms.len()).step_by(2) {
        pairs.push(PairSummary {
            pair: arms[i].pair.to_string(),
            arms: [arms[i].name.to_string(), arms[i + 1].name.to_string()],
            max_loss_diff: max_loss_diff(&outcomes[i], &outcomes[i + 1]),
        });
    }
    write_table(dir.with_extension("csv"), &ARM_COLUMNS, &rows)?;

    let mut header = vec!["step".to_string()];
    header.extend(arms.iter().map(|a| format!("{}_loss", a.name)));
    let steps = outcomes.iter().map(|o| o.records.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_path(out.join(format!("{}_curves.csv", axis.name())))?;
    w.write_record(&header)?;
    for s in 0..steps {
        let mut row = vec![s.to_string()];
        row.extend(outcomes.iter().map(|o| o.records.get(s).map(|r| r.loss.to_string()).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(AxisReport {
        axis: axis.name().to_string(),
        rows,
        pairs,
    })
}

pub fn ablate(run: &RunConfig, out: &Path) -> Result<AblationReport> {
    let base = run.model_config()?;
    let data = run.dataset.load(run.seed, &run.base_dir)?;
    std::fs::create_dir_all(out)?;
    let mut axes = Vec::new();
    for &axis in &run.ablate.axes {
        axes.push(ablate_axis(run, &base, &data, axis, out)?);
    }
    let report = AblationReport {
        schema_version: ABLATION_SCHEMA_VERSION,
        axes,
    };
    std::fs::write(out.join("ablation.json"), to_json(&report)?)?;
    Ok(report)
}
