//! Dense, clustering-guided, multi-head and multi-scale attention, the
//! grid-pooling baseline, and multiply–accumulate accounting.
//!
//! Queries are never reduced. Keys are clustered per head; the resulting
//! labels and aggregation weights are reused for the values so that row `j`
//! of the reduced keys and row `j` of the reduced values describe the same
//! group of tokens.

use serde::{Deserialize, Serialize};

use crate::clustering::{self, clusters_for_ratio, default_k, DensityPeaks};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Init, ParamId, ParamStore, Real, Var};

/// How the per-scale head concatenations are merged before the output
/// projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScaleCombine {
    /// Concatenate along channels; the output projection is `(C·L) × C`.
    #[default]
    Concat,
    /// Sum the per-scale outputs; the output projection is `C × C`.
    Sum,
}

/// What reduces the key/value token set at each scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Density-peaks clustering into `ceil(N/λ)` tokens.
    #[default]
    Cluster,
    /// Learned weighted pooling of fixed `r×r` grid patches, `r = √λ`.
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub heads: usize,
    pub channels: usize,
    /// Logits are divided by `√scale`.
    pub scale: f64,
    pub lambdas: Vec<f64>,
    /// Density neighbors; `None` means `min(5, N − 1)`.
    pub k: Option<usize>,
    #[serde(default)]
    pub combine: ScaleCombine,
    #[serde(default)]
    pub aggregation: Aggregation,
}

impl AttentionSpec {
    /// Scale defaults to the per-head channel count.
    pub fn new(channels: usize, heads: usize, lambdas: Vec<f64>) -> Result<Self> {
        let spec = AttentionSpec {
            heads,
            channels,
            scale: if heads > 0 { (channels / heads) as f64 } else { 0.0 },
            lambdas,
            k: None,
            combine: ScaleCombine::Concat,
            aggregation: Aggregation::Cluster,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.channels == 0 || self.channels % self.heads != 0 {
            return Err(Error::Param(format!(
                "{} channels cannot be split into {} heads",
                self.channels, self.heads
            )));
        }
        if !(self.scale > 0.0) {
            return Err(Error::Param(format!("scale factor {} must be > 0", self.scale)));
        }
        if self.lambdas.is_empty() {
            return Err(Error::Param("at least one reduction ratio is required".into()));
        }
        for (i, &l) in self.lambdas.iter().enumerate() {
            if !(l >= 1.0) || !l.is_finite() {
                return Err(Error::Param(format!("reduction ratio {l} must be >= 1")));
            }
            if self.lambdas[..i].contains(&l) {
                return Err(Error::Param(format!("reduction ratio {l} listed twice")));
            }
            if self.aggregation == Aggregation::Grid && grid_side(l).is_none() {
                return Err(Error::Param(format!(
                    "grid pooling needs a square reduction ratio, got {l}"
                )));
            }
        }
        if self.k == Some(0) {
            return Err(Error::Param("k must be positive".into()));
        }
        Ok(())
    }

    /// Input width of the output projection.
    pub fn proj_width(&self) -> usize {
        match self.combine {
            ScaleCombine::Concat => self.channels * self.lambdas.len(),
            ScaleCombine::Sum => self.channels,
        }
    }
}

/// `r` with `r² = λ`, if λ is a perfect square.
pub fn grid_side(lambda: f64) -> Option<usize> {
    let r = lambda.sqrt().round() as usize;
    (r >= 1 && (r * r) as f64 == lambda).then_some(r)
}

/// Parameter handles of one attention layer.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub phi: ParamId,
    pub phi_bias: ParamId,
    /// One `[C_h × 1]` aggregation-score projection per head.
    pub score_proj: Vec<ParamId>,
    /// Grid arm only: one `[1 × r²]` pooling-logit row per scale.
    pub pool: Vec<Option<ParamId>>,
}

impl AttentionWeights {
    pub fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, spec: &AttentionSpec, std: f64) -> Result<Self> {
        spec.validate()?;
        let c = spec.channels;
        let ch = spec.head_dim();
        let wq = store.register(&format!("{prefix}.wq"), &[c, c], Init::Normal(std))?;
        let wk = store.register(&format!("{prefix}.wk"), &[c, c], Init::Normal(std))?;
        let wv = store.register(&format!("{prefix}.wv"), &[c, c], Init::Normal(std))?;
        let phi = store.register(&format!("{prefix}.phi"), &[spec.proj_width(), c], Init::Normal(std))?;
        let phi_bias = store.register(&format!("{prefix}.phi_bias"), &[c], Init::Zeros)?;
        let mut score_proj = Vec::new();
        if spec.aggregation == Aggregation::Cluster && spec.lambdas.iter().any(|&l| l != 1.0) {
            for h in 0..spec.heads {
                score_proj.push(store.register(&format!("{prefix}.score_proj.h{h}"), &[ch, 1], Init::Zeros)?);
            }
        }
        let mut pool = Vec::new();
        for (j, &l) in spec.lambdas.iter().enumerate() {
            pool.push(match (spec.aggregation, grid_side(l)) {
                (Aggregation::Grid, Some(r)) if r > 1 => {
                    Some(store.register(&format!("{prefix}.pool.s{j}"), &[1, r * r], Init::Zeros)?)
                }
                _ => None,
            });
        }
        Ok(AttentionWeights {
            wq,
            wk,
            wv,
            phi,
            phi_bias,
            score_proj,
            pool,
        })
    }
}

/// Measured attention cost of one layer invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub layer: String,
    pub tokens: usize,
    pub channels: usize,
    pub heads: usize,
    pub lambdas: Vec<f64>,
    /// Key/value tokens attended to at each scale.
    pub kv_tokens: Vec<usize>,
    /// Multiplications in the score and value products, all heads and scales.
    pub measured_macs: u64,
}

/// Tape, parameters and trace sink for one forward pass.
pub struct Session<'s, T> {
    pub graph: Graph<T>,
    pub store: &'s ParamStore<T>,
    pub traces: Vec<AttentionTrace>,
}

impl<'s, T: Real> Session<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Session {
            graph: Graph::new(),
            store,
            traces: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        self.graph.param(self.store, id)
    }

    /// x·W + b
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
        let wv = self.param(w)?;
        let y = self.graph.matmul(x, wv)?;
        match b {
            Some(b) => {
                let bv = self.param(b)?;
                self.graph.add_bias(y, bv)
            }
            None => Ok(y),
        }
    }
}

/// Multiplications spent in the score and value products.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProductCost {
    pub score: u64,
    pub value: u64,
}

impl ProductCost {
    pub fn total(&self) -> u64 {
        self.score + self.value
    }
}

/// softmax(q·kᵀ/√s)·v, also returning the attention matrix.
pub fn attend<T: Real>(g: &mut Graph<T>, q: Var, k: Var, v: Var, s: f64) -> Result<(Var, Var, ProductCost)> {
    if s <= 0.0 {
        return Err(Error::Param(format!("scale factor {s} must be > 0")));
    }
    let (qv, kv, vv) = (g.value(q), g.value(k), g.value(v));
    if qv.cols() != kv.cols() || kv.rows() != vv.rows() {
        return Err(Error::Shape(format!(
            "attention: q {:?}, k {:?}, v {:?}",
            qv.shape(),
            kv.shape(),
            vv.shape()
        )));
    }
    let m0 = g.mults();
    let logits = g.matmul_nt(q, k)?;
    let m1 = g.mults();
    let logits = g.scale(logits, T::lit(1.0 / s.sqrt()))?;
    let probs = g.softmax_rows(logits)?;
    let m2 = g.mults();
    let out = g.matmul(probs, v)?;
    let m3 = g.mults();
    Ok((
        out,
        probs,
        ProductCost {
            score: m1 - m0,
            value: m3 - m2,
        },
    ))
}

/// softmax(q·kᵀ/√s)·v
pub fn dense_attention<T: Real>(g: &mut Graph<T>, q: Var, k: Var, v: Var, s: f64) -> Result<Var> {
    attend(g, q, k, v, s).map(|(out, _, _)| out)
}

/// Reduced keys and values for one head at one scale.
pub struct ReducedKv {
    pub keys: Var,
    pub values: Var,
    pub labels: Option<Vec<usize>>,
}

/// Clusters `k` once and aggregates both `k` and `v` with the same labels
/// and weights. Pass a precomputed analysis to share it across scales.
pub fn cluster_kv<T: Real>(
    g: &mut Graph<T>,
    k: Var,
    v: Var,
    lambda: f64,
    neighbors: Option<usize>,
    score_proj: Option<Var>,
    analysis: Option<&DensityPeaks<T>>,
) -> Result<ReducedKv> {
    let n = g.value(k).rows();
    if g.value(v).rows() != n {
        return Err(Error::Shape("keys and values differ in length".into()));
    }
    if lambda == 1.0 || n == 1 {
        return Ok(ReducedKv {
            keys: k,
            values: v,
            labels: None,
        });
    }
    let m = clusters_for_ratio(n, lambda);
    let owned;
    let dp = match analysis {
        Some(dp) => dp,
        None => {
            owned = DensityPeaks::analyze(g.value(k), neighbors.unwrap_or_else(|| default_k(n)))?;
            &owned
        }
    };
    let result = dp.partition(m)?;
    let scores = match score_proj {
        Some(p) => g.matmul(k, p)?,
        None => g.input(crate::numerics::Tensor::zeros(&[n, 1]))?,
    };
    let (keys, w) = clustering::aggregate(g, k, &result.labels, scores, m)?;
    let values = g.segment_weighted_sum(v, &result.labels, w, m)?;
    Ok(ReducedKv {
        keys,
        values,
        labels: Some(result.labels),
    })
}

/// `ClusAtt(q, k, v; λ)`: attention of all queries against the clustered
/// keys/values. Returns the output and the attention matrix.
pub fn clus_attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    lambda: f64,
    s: f64,
    neighbors: Option<usize>,
    score_proj: Option<Var>,
) -> Result<(Var, Var)> {
    let kv = cluster_kv(g, k, v, lambda, neighbors, score_proj, None)?;
    attend(g, q, kv.keys, kv.values, s).map(|(o, p, _)| (o, p))
}

/// `Cluster(x; {λ₁…λ_L})`: the aggregated token blocks of every scale stacked
/// in the declared order.
pub fn multi_scale_cluster<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    lambdas: &[f64],
    neighbors: Option<usize>,
    score_proj: Option<Var>,
) -> Result<Var> {
    if lambdas.is_empty() {
        return Err(Error::Param("at least one reduction ratio is required".into()));
    }
    let n = g.value(x).rows();
    let dp = if n > 1 && lambdas.iter().any(|&l| l != 1.0) {
        Some(DensityPeaks::analyze(g.value(x), neighbors.unwrap_or_else(|| default_k(n)))?)
    } else {
        None
    };
    let mut blocks = Vec::with_capacity(lambdas.len());
    for &l in lambdas {
        blocks.push(cluster_kv(g, x, x, l, neighbors, score_proj, dp.as_ref())?.keys);
    }
    if blocks.len() == 1 {
        return Ok(blocks[0]);
    }
    g.concat_rows(&blocks)
}

/// Learned weighted pooling of non-overlapping `r×r` patches of a row-major
/// `grid.0 × grid.1` token grid. `pool_logits` is a `[1 × r²]` row; its
/// softmax gives the per-position weights.
pub fn grid_aggregation<T: Real>(g: &mut Graph<T>, x: Var, grid: (usize, usize), r: usize, pool_logits: Option<Var>) -> Result<Var> {
    let (h, w) = grid;
    let n = g.value(x).rows();
    if n != h * w {
        return Err(Error::Geometry(format!("{n} tokens do not form a {h}×{w} grid")));
    }
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::Param(format!("{r}×{r} patches do not tile a {h}×{w} grid")));
    }
    if r == 1 {
        return Ok(x);
    }
    let logits = match pool_logits {
        Some(p) => p,
        None => g.input(crate::numerics::Tensor::zeros(&[1, r * r]))?,
    };
    if g.value(logits).len() != r * r {
        return Err(Error::Shape(format!("grid pooling needs {} logits", r * r)));
    }
    let weights = g.softmax_rows(logits)?;
    let (pw, m) = (w / r, (h / r) * (w / r));
    let mut labels = Vec::with_capacity(n);
    let mut pos = Vec::with_capacity(n);
    for y in 0..h {
        for x in 0..w {
            labels.push((y / r) * pw + x / r);
            pos.push((y % r) * r + x % r);
        }
    }
    let per_token = g.gather(weights, &pos)?;
    g.segment_weighted_sum(x, &labels, per_token, m)
}

/// Reduced keys/values for one head at one scale, under either aggregation.
fn reduce_kv<T: Real>(
    s: &mut Session<'_, T>,
    k: Var,
    v: Var,
    spec: &AttentionSpec,
    weights: &AttentionWeights,
    head: usize,
    scale_idx: usize,
    grid: Option<(usize, usize)>,
    analysis: &mut Option<DensityPeaks<T>>,
) -> Result<(Var, Var)> {
    let lambda = spec.lambdas[scale_idx];
    let n = s.graph.value(k).rows();
    if lambda == 1.0 || n == 1 {
        return Ok((k, v));
    }
    match spec.aggregation {
        Aggregation::Cluster => {
            if analysis.is_none() {
                let nb = spec.k.unwrap_or_else(|| default_k(n));
                *analysis = Some(DensityPeaks::analyze(s.graph.value(k), nb)?);
            }
            let p = match weights.score_proj.get(head) {
                Some(&id) => Some(s.param(id)?),
                None => None,
            };
            let kv = cluster_kv(&mut s.graph, k, v, lambda, spec.k, p, analysis.as_ref())?;
            Ok((kv.keys, kv.values))
        }
        Aggregation::Grid => {
            let grid = grid.ok_or_else(|| Error::Geometry("grid pooling needs the token grid shape".into()))?;
            let r = grid_side(lambda).ok_or_else(|| Error::Param(format!("λ = {lambda} is not square")))?;
            let p = match weights.pool.get(scale_idx).copied().flatten() {
                Some(id) => Some(s.param(id)?),
                None => None,
            };
            let kr = grid_aggregation(&mut s.graph, k, grid, r, p)?;
            let vr = grid_aggregation(&mut s.graph, v, grid, r, p)?;
            Ok((kr, vr))
        }
    }
}

/// `MHMS-ClusAtt(x; {λ₁…λ_L})`. Per scale, every head attends against its
/// own clustered keys/values; heads are concatenated per scale, scales are
/// merged per [`ScaleCombine`] and the result goes through the output
/// projection. `grid` is the token grid shape, required by the grid arm.
pub fn mhms_clus_attention<T: Real>(
    s: &mut Session<'_, T>,
    x: Var,
    weights: &AttentionWeights,
    spec: &AttentionSpec,
    grid: Option<(usize, usize)>,
    layer: &str,
) -> Result<Var> {
    spec.validate()?;
    let xv = s.graph.value(x);
    let (n, c) = (xv.rows(), xv.cols());
    if c != spec.channels {
        return Err(Error::Shape(format!("attention expects {} channels, got {c}", spec.channels)));
    }
    let ch = spec.head_dim();
    let q = s.linear(x, weights.wq, None)?;
    let k = s.linear(x, weights.wk, None)?;
    let v = s.linear(x, weights.wv, None)?;

    let mut heads_q = Vec::with_capacity(spec.heads);
    let mut heads_k = Vec::with_capacity(spec.heads);
    let mut heads_v = Vec::with_capacity(spec.heads);
    for h in 0..spec.heads {
        heads_q.push(s.graph.slice_cols(q, h * ch, ch)?);
        heads_k.push(s.graph.slice_cols(k, h * ch, ch)?);
        heads_v.push(s.graph.slice_cols(v, h * ch, ch)?);
    }

    let mut analyses: Vec<Option<DensityPeaks<T>>> = (0..spec.heads).map(|_| None).collect();
    let mut per_scale = Vec::with_capacity(spec.lambdas.len());
    let mut kv_tokens = Vec::with_capacity(spec.lambdas.len());
    let mut macs = 0u64;
    for j in 0..spec.lambdas.len() {
        let mut outs = Vec::with_capacity(spec.heads);
        let mut kv_len = 0;
        for h in 0..spec.heads {
            let (kr, vr) = reduce_kv(s, heads_k[h], heads_v[h], spec, weights, h, j, grid, &mut analyses[h])?;
            kv_len = s.graph.value(kr).rows();
            let (o, _, cost) = attend(&mut s.graph, heads_q[h], kr, vr, spec.scale)?;
            macs += cost.total();
            outs.push(o);
        }
        kv_tokens.push(kv_len);
        per_scale.push(if outs.len() == 1 { outs[0] } else { s.graph.concat_cols(&outs)? });
    }

    let merged = match spec.combine {
        _ if per_scale.len() == 1 => per_scale[0],
        ScaleCombine::Concat => s.graph.concat_cols(&per_scale)?,
        ScaleCombine::Sum => {
            let mut acc = per_scale[0];
            for &p in &per_scale[1..] {
                acc = s.graph.add(acc, p)?;
            }
            acc
        }
    };
    let y = s.linear(merged, weights.phi, Some(weights.phi_bias))?;
    s.traces.push(AttentionTrace {
        layer: layer.to_string(),
        tokens: n,
        channels: c,
        heads: spec.heads,
        lambdas: spec.lambdas.clone(),
        kv_tokens,
        measured_macs: macs,
    });
    Ok(y)
}

/// `MH-ClusAtt(x; λ)`: the single-scale case of [`mhms_clus_attention`].
pub fn mh_clus_attention<T: Real>(
    s: &mut Session<'_, T>,
    x: Var,
    weights: &AttentionWeights,
    spec: &AttentionSpec,
    lambda: f64,
    layer: &str,
) -> Result<Var> {
    let single = AttentionSpec {
        lambdas: vec![lambda],
        ..spec.clone()
    };
    mhms_clus_attention(s, x, weights, &single, None, layer)
}

/// Analytic multiply–accumulate counts of the score and value products of
/// one attention layer over `n` tokens (projections excluded).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCount {
    /// `2·N²·C`
    pub dense: u64,
    /// `2·N·C·Σ ceil(N/λ_j)`
    pub clustered: u64,
    /// `2·N·ceil(N/λ_j)·C` for each scale.
    pub per_scale: Vec<u64>,
    /// `ceil(N/λ_j)` for each scale.
    pub kv_tokens: Vec<usize>,
}

pub fn attention_macs(n: usize, spec: &AttentionSpec) -> MacCount {
    let (n64, c) = (n as u64, spec.channels as u64);
    let kv_tokens: Vec<usize> = spec.lambdas.iter().map(|&l| clusters_for_ratio(n, l)).collect();
    let per_scale: Vec<u64> = kv_tokens.iter().map(|&m| 2 * n64 * m as u64 * c).collect();
    MacCount {
        dense: 2 * n64 * n64 * c,
        clustered: per_scale.iter().sum(),
        per_scale,
        kv_tokens,
    }
}

/// Output-projection and Q/K/V projection multiplies, reported separately.
pub fn projection_macs(n: usize, spec: &AttentionSpec) -> u64 {
    let c = spec.channels as u64;
    let n = n as u64;
    3 * n * c * c + n * spec.proj_width() as u64 * c
}
