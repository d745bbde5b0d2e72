//! Brute-force reference implementations.
//!
//! Everything here works on plain `Vec<Vec<f64>>` rows and is written for
//! obviousness, not speed: distances by direct differences, neighbor sets by
//! rank counting, peak distance by exhaustive scans and labels by fixed-point
//! propagation. Nothing in this crate depends on `clustr-core`.

/// Everything the density-peaks pipeline produces for one token set.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleClusters {
    pub rho: Vec<f64>,
    pub delta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub peaks: Vec<usize>,
    pub labels: Vec<usize>,
}

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn distance_matrix(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            d[i][j] = euclid(&x[i], &x[j]);
        }
    }
    d
}

/// `j` is among the k nearest of `i` iff fewer than k other tokens beat it
/// under the (distance, index) order. Squared distances are summed smallest
/// first so equal neighborhoods give bit-equal densities.
pub fn density(d: &[Vec<f64>], k: usize) -> Vec<f64> {
    let n = d.len();
    (0..n)
        .map(|i| {
            let mut picked = Vec::new();
            for j in 0..n {
                if j == i {
                    continue;
                }
                let beaten_by = (0..n)
                    .filter(|&l| l != i && l != j)
                    .filter(|&l| d[i][l] < d[i][j] || (d[i][l] == d[i][j] && l < j))
                    .count();
                if beaten_by < k {
                    picked.push(d[i][j]);
                }
            }
            picked.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let acc: f64 = picked.iter().map(|v| v * v).sum();
            (-acc / k as f64).exp()
        })
        .collect()
}

/// Does `j` come strictly before `i` in the (density desc, index asc) order?
pub fn precedes(rho: &[f64], j: usize, i: usize) -> bool {
    rho[j] > rho[i] || (rho[j] == rho[i] && j < i)
}

pub fn peak_distance(d: &[Vec<f64>], rho: &[f64]) -> Vec<f64> {
    let n = d.len();
    (0..n)
        .map(|i| {
            let higher: Vec<usize> = (0..n).filter(|&j| precedes(rho, j, i)).collect();
            if higher.is_empty() {
                (0..n).map(|j| d[i][j]).fold(0.0, f64::max)
            } else {
                higher.iter().map(|&j| d[i][j]).fold(f64::INFINITY, f64::min)
            }
        })
        .collect()
}

fn score_beats(gamma: &[f64], a: usize, b: usize) -> bool {
    gamma[a] > gamma[b] || (gamma[a] == gamma[b] && a < b)
}

/// Top-`m` by decision score, with the densest token forced in.
pub fn peaks(rho: &[f64], gamma: &[f64], m: usize) -> Vec<usize> {
    let n = gamma.len();
    let rank = |i: usize| (0..n).filter(|&j| score_beats(gamma, j, i)).count();
    let mut chosen: Vec<usize> = (0..n).filter(|&i| rank(i) < m).collect();
    let first = (0..n)
        .find(|&i| !(0..n).any(|j| precedes(rho, j, i)))
        .expect("some token has no predecessor");
    if !chosen.contains(&first) {
        let worst = *chosen.iter().max_by_key(|&&i| rank(i)).unwrap();
        chosen.retain(|&i| i != worst);
        chosen.push(first);
    }
    chosen.sort_by_key(|&i| rank(i));
    chosen
}

/// Labels by repeated sweeps: a token adopts its parent's label once the
/// parent has one. Parent = nearest predecessor, ties to the lower index.
pub fn labels(d: &[Vec<f64>], rho: &[f64], peaks: &[usize]) -> Vec<usize> {
    let n = d.len();
    let mut label: Vec<Option<usize>> = vec![None; n];
    for (j, &p) in peaks.iter().enumerate() {
        label[p] = Some(j);
    }
    let parent: Vec<Option<usize>> = (0..n)
        .map(|i| {
            let mut best: Option<usize> = None;
            for j in 0..n {
                if !precedes(rho, j, i) {
                    continue;
                }
                best = match best {
                    Some(b) if d[i][b] < d[i][j] || (d[i][b] == d[i][j] && b < j) => Some(b),
                    _ => Some(j),
                };
            }
            best
        })
        .collect();
    loop {
        let mut changed = false;
        for i in 0..n {
            if label[i].is_none() {
                if let Some(p) = parent[i] {
                    if let Some(l) = label[p] {
                        label[i] = Some(l);
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    label
        .into_iter()
        .map(|l| l.expect("every token reaches a peak"))
        .collect()
}

pub fn cluster(x: &[Vec<f64>], k: usize, m: usize) -> OracleClusters {
    let d = distance_matrix(x);
    let rho = density(&d, k);
    let delta = peak_distance(&d, &rho);
    let gamma: Vec<f64> = rho.iter().zip(&delta).map(|(r, s)| r * s).collect();
    let peaks = peaks(&rho, &gamma, m);
    let labels = labels(&d, &rho, &peaks);
    OracleClusters {
        rho,
        delta,
        gamma,
        peaks,
        labels,
    }
}

/// Rows of `x` summed per label with the given weights.
pub fn segment_sum(x: &[Vec<f64>], labels: &[usize], w: &[f64], m: usize) -> Vec<Vec<f64>> {
    let c = x.first().map_or(0, |r| r.len());
    let mut out = vec![vec![0.0; c]; m];
    for seg in 0..m {
        for i in 0..x.len() {
            if labels[i] == seg {
                for ch in 0..c {
                    out[seg][ch] += w[i] * x[i][ch];
                }
            }
        }
    }
    out
}

/// Softmax of `scores` restricted to each label group.
pub fn segment_softmax(scores: &[f64], labels: &[usize]) -> Vec<f64> {
    (0..scores.len())
        .map(|i| {
            let members: Vec<usize> = (0..scores.len()).filter(|&j| labels[j] == labels[i]).collect();
            let top = members.iter().map(|&j| scores[j]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = members.iter().map(|&j| (scores[j] - top).exp()).sum();
            (scores[i] - top).exp() / z
        })
        .collect()
}

/// softmax(q kᵀ / √s) v by explicit loops.
pub fn attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], s: f64) -> Vec<Vec<f64>> {
    let cv = v.first().map_or(0, |r| r.len());
    q.iter()
        .map(|qi| {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / s.sqrt())
                .collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut out = vec![0.0; cv];
            for (j, vj) in v.iter().enumerate() {
                for c in 0..cv {
                    out[c] += e[j] / z * vj[c];
                }
            }
            out
        })
        .collect()
}

/// r×r patch pooling of a row-major `h×w` token grid with per-position weights.
pub fn grid_pool(x: &[Vec<f64>], h: usize, w: usize, r: usize, weights: &[f64]) -> Vec<Vec<f64>> {
    let c = x[0].len();
    let mut out = Vec::new();
    for py in 0..h / r {
        for px in 0..w / r {
            let mut acc = vec![0.0; c];
            for dy in 0..r {
                for dx in 0..r {
                    let tok = &x[(py * r + dy) * w + px * r + dx];
                    for ch in 0..c {
                        acc[ch] += weights[dy * r + dx] * tok[ch];
                    }
                }
            }
            out.push(acc);
        }
    }
    out
}

pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = b[0].len();
    a.iter()
        .map(|row| {
            (0..m)
                .map(|j| row.iter().enumerate().map(|(k, v)| v * b[k][j]).sum())
                .collect()
        })
        .collect()
}
