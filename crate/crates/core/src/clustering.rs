//! kNN density-peaks clustering of a token set and weighted aggregation of
//! each cluster into one representative token.
//!
//! Pipeline: pairwise distances → local density ρ → peak distance δ →
//! decision score γ = ρ·δ → top-M peaks → nearest-denser assignment →
//! per-cluster softmax-weighted sum.
//!
//! Every step that needs an ordering uses the same total order over tokens:
//! density descending, then index ascending. The discrete part (everything up
//! to the labels) runs on plain values and is not differentiated; only
//! [`aggregate`] is recorded on the tape.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};

/// Neighbor count and cluster count for one clustering call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClusterParams {
    pub k: usize,
    pub m: usize,
}

/// Number of clusters for `n` tokens at reduction ratio `lambda`:
/// `max(1, ceil(n / lambda))`.
pub fn clusters_for_ratio(n: usize, lambda: f64) -> usize {
    ((n as f64 / lambda).ceil() as usize).clamp(1, n.max(1))
}

/// `min(5, n − 1)`, floored at 1.
pub fn default_k(n: usize) -> usize {
    n.saturating_sub(1).clamp(1, 5)
}

impl ClusterParams {
    pub fn new(n: usize, k: usize, m: usize) -> Result<Self> {
        if n >= 2 && (k == 0 || k > n - 1) {
            return Err(Error::Param(format!("k = {k} outside [1, {}]", n - 1)));
        }
        if m == 0 || m > n {
            return Err(Error::Param(format!("M = {m} outside [1, {n}]")));
        }
        Ok(ClusterParams { k, m })
    }

    /// Derives `M` from a reduction ratio; `k = None` picks [`default_k`].
    pub fn from_ratio(n: usize, lambda: f64, k: Option<usize>) -> Result<Self> {
        if !(lambda >= 1.0) || !lambda.is_finite() {
            return Err(Error::Param(format!("reduction ratio {lambda} must be >= 1")));
        }
        Self::new(n, k.unwrap_or_else(|| default_k(n)), clusters_for_ratio(n, lambda))
    }
}

/// Everything the discrete clustering step produces.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterResult<T> {
    pub rho: Vec<T>,
    pub delta: Vec<T>,
    pub gamma: Vec<T>,
    pub peaks: Vec<usize>,
    pub labels: Vec<usize>,
}

impl<T: Real> ClusterResult<T> {
    /// Every token its own cluster. Density statistics are not computed:
    /// ρ is reported as 1 and δ, γ as 0.
    pub fn identity(n: usize) -> Self {
        ClusterResult {
            rho: vec![T::one(); n],
            delta: vec![T::zero(); n],
            gamma: vec![T::zero(); n],
            peaks: (0..n).collect(),
            labels: (0..n).collect(),
        }
    }

    pub fn num_clusters(&self) -> usize {
        self.peaks.len()
    }
}

/// Euclidean distances from coordinate differences. Symmetric with an exact
/// zero diagonal.
pub fn pairwise_distances<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "pairwise distances need at least 2 tokens, got {n}"
        )));
    }
    let mut d = vec![T::zero(); n * n];
    for i in 0..n {
        let xi = x.row(i);
        for j in i + 1..n {
            let v = xi
                .iter()
                .zip(x.row(j))
                .fold(T::zero(), |acc, (&p, &q)| acc + (p - q) * (p - q))
                .sqrt();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    Tensor::new(vec![n, n], d)
}

/// ρᵢ = exp(−(1/k)·Σ d(i,j)² over the k nearest j ≠ i), summed nearest
/// first so that tied neighborhoods give bit-equal densities.
pub fn local_density<T: Real>(d: &Tensor<T>, k: usize) -> Result<Vec<T>> {
    let n = d.rows();
    if k == 0 || k + 1 > n {
        return Err(Error::Param(format!("k = {k} outside [1, {}]", n.saturating_sub(1))));
    }
    let kt = T::lit(k as f64);
    let mut buf: Vec<(T, usize)> = Vec::with_capacity(n - 1);
    Ok((0..n)
        .map(|i| {
            buf.clear();
            buf.extend(d.row(i).iter().enumerate().filter(|&(j, _)| j != i).map(|(j, &v)| (v, j)));
            let cmp = |a: &(T, usize), b: &(T, usize)| {
                a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
            };
            if k < buf.len() {
                buf.select_nth_unstable_by(k - 1, cmp);
            }
            buf[..k].sort_unstable_by(cmp);
            let s: T = buf[..k].iter().map(|&(v, _)| v * v).sum();
            (-s / kt).exp()
        })
        .collect())
}

/// Token indices in the total order: density descending, index ascending.
pub fn density_order<T: Real>(rho: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rho.len()).collect();
    order.sort_by(|&a, &b| rho[b].partial_cmp(&rho[a]).unwrap().then(a.cmp(&b)));
    order
}

fn peak_distance_ordered<T: Real>(d: &Tensor<T>, order: &[usize]) -> Vec<T> {
    let n = d.rows();
    let mut delta = vec![T::zero(); n];
    for (pos, &i) in order.iter().enumerate() {
        let row = d.row(i);
        delta[i] = if pos == 0 {
            row.iter().copied().fold(T::zero(), T::max)
        } else {
            order[..pos].iter().map(|&j| row[j]).fold(T::infinity(), T::min)
        };
    }
    delta
}

/// δᵢ = distance to the nearest token earlier in the total order; the first
/// token gets its largest distance instead.
pub fn peak_distance<T: Real>(d: &Tensor<T>, rho: &[T]) -> Vec<T> {
    peak_distance_ordered(d, &density_order(rho))
}

/// γᵢ = ρᵢ·δᵢ
pub fn decision_scores<T: Real>(rho: &[T], delta: &[T]) -> Vec<T> {
    rho.iter().zip(delta).map(|(&r, &s)| r * s).collect()
}

fn by_score<T: Real>(gamma: &[T]) -> impl Fn(&usize, &usize) -> std::cmp::Ordering + '_ {
    move |&a, &b| gamma[b].partial_cmp(&gamma[a]).unwrap().then(a.cmp(&b))
}

/// Indices of the `m` largest decision scores (ties to the lower index),
/// sorted by descending score.
pub fn select_peaks<T: Real>(gamma: &[T], m: usize) -> Result<Vec<usize>> {
    let n = gamma.len();
    if m == 0 || m > n {
        return Err(Error::Param(format!("M = {m} outside [1, {n}]")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(by_score(gamma));
    idx.truncate(m);
    Ok(idx)
}

/// Makes sure the order-first token is a peak. If it is missing, the
/// lowest-scoring selected peak is swapped out for it.
fn force_first_peak<T: Real>(mut peaks: Vec<usize>, gamma: &[T], first: usize) -> Vec<usize> {
    if !peaks.contains(&first) {
        peaks.pop();
        peaks.push(first);
        peaks.sort_by(by_score(gamma));
    }
    peaks
}

fn assign_ordered<T: Real>(d: &Tensor<T>, order: &[usize], peaks: &[usize]) -> Result<Vec<usize>> {
    let n = d.rows();
    const UNSET: usize = usize::MAX;
    let mut labels = vec![UNSET; n];
    for (j, &p) in peaks.iter().enumerate() {
        if p >= n {
            return Err(Error::Param(format!("peak index {p} out of range")));
        }
        labels[p] = j;
    }
    if let Some(&first) = order.first() {
        if labels[first] == UNSET {
            return Err(Error::Contract(format!(
                "token {first} has no denser token and must be a peak"
            )));
        }
    }
    for (pos, &i) in order.iter().enumerate() {
        if labels[i] != UNSET {
            continue;
        }
        let row = d.row(i);
        let mut best = order[0];
        for &j in &order[1..pos] {
            if row[j] < row[best] || (row[j] == row[best] && j < best) {
                best = j;
            }
        }
        labels[i] = labels[best];
    }
    Ok(labels)
}

/// Walks tokens in the total order; a peak keeps its own label, anything else
/// inherits from its nearest earlier token (ties to the lower index).
pub fn assign_clusters<T: Real>(d: &Tensor<T>, rho: &[T], peaks: &[usize]) -> Result<Vec<usize>> {
    assign_ordered(d, &density_order(rho), peaks)
}

/// Distances, density, order and decision scores of one token set; reusable
/// across several cluster counts.
#[derive(Debug, Clone)]
pub struct DensityPeaks<T> {
    dist: Tensor<T>,
    rho: Vec<T>,
    delta: Vec<T>,
    gamma: Vec<T>,
    order: Vec<usize>,
}

impl<T: Real> DensityPeaks<T> {
    pub fn analyze(x: &Tensor<T>, k: usize) -> Result<Self> {
        let dist = pairwise_distances(x)?;
        let rho = local_density(&dist, k)?;
        let order = density_order(&rho);
        let delta = peak_distance_ordered(&dist, &order);
        let gamma = decision_scores(&rho, &delta);
        Ok(DensityPeaks {
            dist,
            rho,
            delta,
            gamma,
            order,
        })
    }

    pub fn distances(&self) -> &Tensor<T> {
        &self.dist
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Splits the token set into `m` clusters.
    pub fn partition(&self, m: usize) -> Result<ClusterResult<T>> {
        let peaks = select_peaks(&self.gamma, m)?;
        let peaks = force_first_peak(peaks, &self.gamma, self.order[0]);
        let labels = assign_ordered(&self.dist, &self.order, &peaks)?;
        Ok(ClusterResult {
            rho: self.rho.clone(),
            delta: self.delta.clone(),
            gamma: self.gamma.clone(),
            peaks,
            labels,
        })
    }
}

/// The discrete half of the pipeline: token set → [`ClusterResult`].
pub fn cluster<T: Real>(x: &Tensor<T>, params: ClusterParams) -> Result<ClusterResult<T>> {
    let n = x.rows();
    if n == 1 && params.m == 1 {
        return Ok(ClusterResult::identity(1));
    }
    ClusterParams::new(n, params.k, params.m)?;
    DensityPeaks::analyze(x, params.k)?.partition(params.m)
}

/// Aggregated cluster tokens together with the weights that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedTokens<T> {
    pub tokens: Tensor<T>,
    pub weights: Vec<T>,
    pub source: ClusterResult<T>,
}

/// Records the weighted aggregation on the tape: weights are the softmax of
/// `scores` within each cluster, and row `j` of the output is the weighted sum
/// of cluster `j`'s members. Returns `(tokens, weights)`. Labels are treated
/// as constants.
pub fn aggregate<T: Real>(g: &mut Graph<T>, x: Var, labels: &[usize], scores: Var, m: usize) -> Result<(Var, Var)> {
    let w = g.segment_softmax(scores, labels)?;
    let w = g.reshape(w, vec![labels.len()])?;
    let tokens = g.segment_weighted_sum(x, labels, w, m)?;
    Ok((tokens, w))
}

/// Value-only [`aggregate`].
pub fn aggregate_values<T: Real>(x: &Tensor<T>, source: ClusterResult<T>, scores: &Tensor<T>) -> Result<AggregatedTokens<T>> {
    let mut g = Graph::new();
    let xv = g.input(x.clone())?;
    let sv = g.input(scores.clone())?;
    let m = source.num_clusters();
    let (t, w) = aggregate(&mut g, xv, &source.labels, sv, m)?;
    Ok(AggregatedTokens {
        tokens: g.value(t).clone(),
        weights: g.value(w).data().to_vec(),
        source,
    })
}

/// `Cluster(x; λ)`: the full pipeline from tokens to aggregated tokens.
/// `λ == 1` or a single token returns `x` unchanged with identity labels.
pub fn cluster_tokens<T: Real>(x: &Tensor<T>, lambda: f64, k: Option<usize>, scores: &Tensor<T>) -> Result<AggregatedTokens<T>> {
    let n = x.rows();
    if n == 0 {
        return Err(Error::Degenerate("empty token set".into()));
    }
    if scores.len() != n {
        return Err(Error::Shape(format!("{} scores for {n} tokens", scores.len())));
    }
    if lambda == 1.0 || n == 1 {
        return Ok(AggregatedTokens {
            tokens: x.clone(),
            weights: vec![T::one(); n],
            source: ClusterResult::identity(n),
        });
    }
    let params = ClusterParams::from_ratio(n, lambda, k)?;
    let source = cluster(x, params)?;
    aggregate_values(x, source, scores)
}
