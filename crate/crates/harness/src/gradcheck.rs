//! The `gradcheck` subcommand: finite-difference checks of the clustered
//! aggregation, one attention layer, one block and a whole model.

use std::path::Path;

use clustr_core::attention::{mhms_clus_attention, AttentionSpec, AttentionWeights, Session};
use clustr_core::clustering::{aggregate, cluster, ClusterParams};
use clustr_core::model::{build_model, transformer_block, BlockWeights, ModelConfig};
use clustr_core::numerics::gradcheck::all_params;
use clustr_core::numerics::{finite_diff_gradcheck, Coverage, GradcheckReport, Graph, ParamStore, Tensor};
use clustr_core::Var;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{stream_rng, DATA_STREAM};
use crate::error::{HarnessError, Result};
use crate::report::to_json;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetResult {
    pub target: String,
    pub max_rel_err: f64,
    pub worst_param: Option<String>,
    pub entries_checked: usize,
    pub param_tensors: usize,
    pub passes: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSummary {
    pub schema_version: u32,
    pub h: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub targets: Vec<TargetResult>,
}

impl GradcheckSummary {
    pub fn passes(&self) -> bool {
        self.targets.iter().all(|t| t.passes)
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape matches")
}

/// Replaces every parameter with O(1) values so no gradient is negligible;
/// layer-norm gains are centered on 1.
pub fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.ends_with(".gain"), p.tensor.shape().to_vec())).collect();
    for (id, gain, shape) in ids {
        let mut t = rand_tensor(rng, &shape, scale);
        if gain {
            t = t.map(|v| 1.0 + v);
        }
        store.set(id, t).expect("shape unchanged");
    }
}

fn on_graph<F>(store: &ParamStore<f64>, g: &mut Graph<f64>, f: F) -> clustr_core::Result<Var>
where
    F: FnOnce(&mut Session<'_, f64>) -> clustr_core::Result<Var>,
{
    let mut s = Session::new(store);
    std::mem::swap(&mut s.graph, g);
    let out = f(&mut s);
    std::mem::swap(&mut s.graph, g);
    out
}

fn weighted_sum(g: &mut Graph<f64>, y: Var, r: &Tensor<f64>) -> clustr_core::Result<Var> {
    let rv = g.input(r.clone())?;
    let p = g.mul(y, rv)?;
    g.sum(p)
}

fn result(target: &str, rep: GradcheckReport, tol: f64) -> TargetResult {
    TargetResult {
        target: target.to_string(),
        max_rel_err: rep.max_rel_err,
        worst_param: rep.worst.clone(),
        entries_checked: rep.entries_checked,
        param_tensors: rep.params.len(),
        passes: rep.passes(tol),
    }
}

pub fn check_aggregate(seed: u64, h: f64, tol: f64) -> Result<TargetResult> {
    let mut rng = stream_rng(seed, DATA_STREAM);
    let x0 = rand_tensor(&mut rng, &[12, 3], 2.0);
    let labels = cluster(&x0, ClusterParams::from_ratio(12, 4.0, None)?)?.labels;
    let mut store = ParamStore::<f64>::new(seed);
    let x = store.insert("x", x0)?;
    let s = store.insert("scores", rand_tensor(&mut rng, &[12], 1.0))?;
    let r = rand_tensor(&mut rng, &[3, 3], 1.0);
    let rep = finite_diff_gradcheck(&mut store, &[x, s], h, Coverage::All, |st, g| {
        let (xv, sv) = (g.param(st, x)?, g.param(st, s)?);
        let (tokens, _) = aggregate(g, xv, &labels, sv, 3)?;
        weighted_sum(g, tokens, &r)
    })?;
    Ok(result("aggregate", rep, tol))
}

pub fn check_attention(seed: u64, h: f64, tol: f64) -> Result<TargetResult> {
    let mut rng = stream_rng(seed, DATA_STREAM);
    let spec = AttentionSpec::new(8, 2, vec![4.0, 1.0])?;
    let mut store = ParamStore::<f64>::new(seed);
    let w = AttentionWeights::register(&mut store, "attn", &spec, 0.02)?;
    randomize(&mut store, &mut rng, 0.5);
    let x = rand_tensor(&mut rng, &[16, 8], 1.0);
    let r = rand_tensor(&mut rng, &[16, 8], 1.0);
    let ids = all_params(&store);
    let rep = finite_diff_gradcheck(&mut store, &ids, h, Coverage::All, |st, g| {
        on_graph(st, g, |s| {
            let xv = s.graph.input(x.clone())?;
            let y = mhms_clus_attention(s, xv, &w, &spec, None, "attn")?;
            weighted_sum(&mut s.graph, y, &r)
        })
    })?;
    Ok(result("mhms_clus_attention", rep, tol))
}

pub fn check_block(seed: u64, h: f64, tol: f64) -> Result<TargetResult> {
    let mut rng = stream_rng(seed, DATA_STREAM);
    let spec = AttentionSpec::new(8, 2, vec![4.0, 1.0])?;
    let mut store = ParamStore::<f64>::new(seed);
    let block = BlockWeights::register(&mut store, "block", spec, 4, 0.02)?;
    randomize(&mut store, &mut rng, 0.4);
    let z = rand_tensor(&mut rng, &[16, 8], 1.0);
    let r = rand_tensor(&mut rng, &[16, 8], 1.0);
    let ids = all_params(&store);
    let rep = finite_diff_gradcheck(&mut store, &ids, h, Coverage::All, |st, g| {
        on_graph(st, g, |s| {
            let zv = s.graph.input(z.clone())?;
            let y = transformer_block(s, zv, &block, Some((4, 4)))?;
            weighted_sum(&mut s.graph, y, &r)
        })
    })?;
    Ok(result("transformer_block", rep, tol))
}

/// Cross-entropy of a two-image batch through the whole model, sampling
/// `entries` coordinates of every parameter tensor.
pub fn check_model(cfg: &ModelConfig, seed: u64, h: f64, tol: f64, entries: usize) -> Result<TargetResult> {
    let mut rng = stream_rng(seed, DATA_STREAM);
    let mut model = build_model::<f64>(cfg, seed)?;
    randomize(&mut model.params, &mut rng, 0.3);
    let res = cfg.input_resolution;
    let batch = rand_tensor(&mut rng, &[2, res, res, cfg.in_channels], 1.0);
    let targets = [0, cfg.num_classes - 1];
    let ids = all_params(&model.params);
    let mut store = model.params.clone();
    let m = &model;
    let rep = finite_diff_gradcheck(&mut store, &ids, h, Coverage::PerParam(entries.max(1)), |st, g| {
        on_graph(st, g, |s| {
            let logits = m.forward_batch(s, &batch)?;
            s.graph.cross_entropy(logits, &targets)
        })
    })?;
    Ok(result(&format!("model:{}", cfg.variant), rep, tol))
}

/// Runs all four checks and writes `gradcheck.json`. A failed tolerance is
/// reported as a numeric failure after the file is written.
pub fn gradcheck_run(run: &RunConfig, out: &Path) -> Result<GradcheckSummary> {
    let o = &run.gradcheck;
    if !(o.h > 0.0 && o.tolerance > 0.0) {
        return Err(HarnessError::Config("h and tolerance must be positive".into()));
    }
    let cfg = run.model_config()?;
    let targets = vec![
        check_aggregate(run.seed, o.h, o.tolerance)?,
        check_attention(run.seed, o.h, o.tolerance)?,
        check_block(run.seed, o.h, o.tolerance)?,
        check_model(&cfg, run.seed, o.h, o.tolerance, o.entries_per_param)?,
    ];
    let summary = GradcheckSummary {
        schema_version: 1,
        h: o.h,
        tolerance: o.tolerance,
        seed: run.seed,
        targets,
    };
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("gradcheck.json"), to_json(&summary)?)?;
    if !summary.passes() {
        let worst = summary.targets.iter().filter(|t| !t.passes).map(|t| format!("{} ({:.3e})", t.target, t.max_rel_err));
        return Err(HarnessError::Numeric(format!("gradcheck above tolerance: {}", worst.collect::<Vec<_>>().join(", "))));
    }
    Ok(summary)
}
