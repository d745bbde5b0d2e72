mod common;

use clustr_core::attention::{
    attend, attention_macs, clus_attention, cluster_kv, dense_attention, grid_aggregation, mh_clus_attention, mhms_clus_attention,
    multi_scale_cluster, Aggregation, AttentionSpec, AttentionTrace, AttentionWeights, Session,
};
use clustr_core::clustering::{cluster_tokens, clusters_for_ratio, default_k};
use clustr_core::numerics::gradcheck::all_params;
use clustr_core::numerics::{finite_diff_gradcheck, Coverage, Graph, ParamStore, Tensor};
use common::{cols, hcat, max_abs, on_graph, rand_rows, rand_tensor, rng, weighted_sum};
use rand::seq::SliceRandom;
use rand::Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

/// Loop-based reference for one multi-head multi-scale layer, built only
/// from the brute-force oracle crate.
struct OracleLayer {
    wq: Vec<Vec<f64>>,
    wk: Vec<Vec<f64>>,
    wv: Vec<Vec<f64>>,
    phi: Vec<Vec<f64>>,
    bias: Vec<f64>,
    score_proj: Vec<Vec<f64>>,
}

impl OracleLayer {
    fn from_store(store: &ParamStore<f64>, w: &AttentionWeights) -> Self {
        OracleLayer {
            wq: store.tensor(w.wq).to_rows(),
            wk: store.tensor(w.wk).to_rows(),
            wv: store.tensor(w.wv).to_rows(),
            phi: store.tensor(w.phi).to_rows(),
            bias: store.tensor(w.phi_bias).data().to_vec(),
            score_proj: w.score_proj.iter().map(|&p| store.tensor(p).data().to_vec()).collect(),
        }
    }

    fn forward(&self, x: &[Vec<f64>], spec: &AttentionSpec) -> Vec<Vec<f64>> {
        let n = x.len();
        let ch = spec.head_dim();
        let (q, k, v) = (
            clustr_oracle::matmul(x, &self.wq),
            clustr_oracle::matmul(x, &self.wk),
            clustr_oracle::matmul(x, &self.wv),
        );
        let mut scales = Vec::new();
        for &lambda in &spec.lambdas {
            let mut heads = Vec::new();
            for h in 0..spec.heads {
                let (qh, kh, vh) = (cols(&q, h * ch, ch), cols(&k, h * ch, ch), cols(&v, h * ch, ch));
                let (kr, vr) = if lambda == 1.0 || n == 1 {
                    (kh, vh)
                } else {
                    let m = (n as f64 / lambda).ceil() as usize;
                    let labels = clustr_oracle::cluster(&kh, spec.k.unwrap_or(default_k(n)), m).labels;
                    let scores: Vec<f64> = kh
                        .iter()
                        .map(|r| r.iter().zip(&self.score_proj[h]).map(|(a, b)| a * b).sum())
                        .collect();
                    let w = clustr_oracle::segment_softmax(&scores, &labels);
                    (clustr_oracle::segment_sum(&kh, &labels, &w, m), clustr_oracle::segment_sum(&vh, &labels, &w, m))
                };
                heads.push(clustr_oracle::attention(&qh, &kr, &vr, spec.scale));
            }
            scales.push(hcat(&heads));
        }
        let merged = hcat(&scales);
        clustr_oracle::matmul(&merged, &self.phi)
            .into_iter()
            .map(|r| r.iter().zip(&self.bias).map(|(a, b)| a + b).collect())
            .collect()
    }
}

fn layer(seed: u64, c: usize, heads: usize, lambdas: Vec<f64>) -> (ParamStore<f64>, AttentionWeights, AttentionSpec) {
    let spec = AttentionSpec::new(c, heads, lambdas).unwrap();
    let mut store = ParamStore::new(seed);
    let w = AttentionWeights::register(&mut store, "attn", &spec, 0.5).unwrap();
    // Nonzero aggregation scores and bias so every parameter matters.
    let mut r = rng(seed ^ 0xABCD);
    for &p in w.score_proj.iter().chain([&w.phi_bias]) {
        let shape = store.tensor(p).shape().to_vec();
        store.set(p, rand_tensor(&mut r, &shape, 1.0)).unwrap();
    }
    (store, w, spec)
}

fn run_layer(store: &ParamStore<f64>, w: &AttentionWeights, spec: &AttentionSpec, x: &Tensor<f64>) -> (Tensor<f64>, Vec<AttentionTrace>) {
    let mut s = Session::new(store);
    let xv = s.graph.input(x.clone()).unwrap();
    let y = mhms_clus_attention(&mut s, xv, w, spec, None, "attn").unwrap();
    (s.graph.value(y).clone(), s.traces)
}

#[test]
fn dense_attention_matches_loops() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let (q, k, v) = (rand_rows(&mut r, 4, 2, 2.0), rand_rows(&mut r, 4, 2, 2.0), rand_rows(&mut r, 4, 2, 2.0));
        let mut g = Graph::<f64>::new();
        let (qv, kv, vv) = (
            g.input(Tensor::from_rows(&q).unwrap()).unwrap(),
            g.input(Tensor::from_rows(&k).unwrap()).unwrap(),
            g.input(Tensor::from_rows(&v).unwrap()).unwrap(),
        );
        let out = dense_attention(&mut g, qv, kv, vv, 2.0).unwrap();
        assert!(max_abs(&g.value(out).to_rows(), &clustr_oracle::attention(&q, &k, &v, 2.0)) <= 1e-12);
    }
}

#[test]
fn unit_ratio_equals_dense() {
    for seed in SEEDS {
        let mut r = rng(seed);
        for _ in 0..40 {
            let n = r.random_range(1..=32);
            let c = r.random_range(1..=6);
            let mut g = Graph::<f64>::new();
            let q = g.input(rand_tensor(&mut r, &[n, c], 2.0)).unwrap();
            let k = g.input(rand_tensor(&mut r, &[n, c], 2.0)).unwrap();
            let v = g.input(rand_tensor(&mut r, &[n, c], 2.0)).unwrap();
            let dense = dense_attention(&mut g, q, k, v, c as f64).unwrap();
            let (clus, _) = clus_attention(&mut g, q, k, v, 1.0, c as f64, None, None).unwrap();
            assert!(g.value(dense).max_abs_diff(g.value(clus)) <= 1e-12);
        }
    }
}

#[test]
fn line_keys_attend_to_cluster_means() {
    let keys = vec![vec![0.0], vec![0.2], vec![9.0], vec![9.4]];
    for seed in SEEDS {
        let mut r = rng(seed);
        let q = rand_rows(&mut r, 4, 1, 1.0);
        let v = rand_rows(&mut r, 4, 1, 1.0);
        let mut g = Graph::<f64>::new();
        let (qv, kv, vv) = (
            g.input(Tensor::from_rows(&q).unwrap()).unwrap(),
            g.input(Tensor::from_rows(&keys).unwrap()).unwrap(),
            g.input(Tensor::from_rows(&v).unwrap()).unwrap(),
        );
        let (out, probs) = clus_attention(&mut g, qv, kv, vv, 2.0, 1.0, Some(1), None).unwrap();
        assert_eq!(g.value(probs).shape(), &[4, 2]);
        let vmeans = vec![vec![(v[0][0] + v[1][0]) / 2.0], vec![(v[2][0] + v[3][0]) / 2.0]];
        let want = clustr_oracle::attention(&q, &[vec![0.1], vec![9.2]], &vmeans, 1.0);
        assert!(max_abs(&g.value(out).to_rows(), &want) <= 1e-12);
    }
}

#[test]
fn clustered_scores_shape_and_rows() {
    for seed in SEEDS {
        let mut r = rng(seed);
        for &(n, lambda) in &[(16, 4.0), (17, 4.0), (9, 2.0), (30, 16.0)] {
            let mut g = Graph::<f64>::new();
            let q = g.input(rand_tensor(&mut r, &[n, 3], 2.0)).unwrap();
            let k = g.input(rand_tensor(&mut r, &[n, 3], 2.0)).unwrap();
            let v = g.input(rand_tensor(&mut r, &[n, 3], 2.0)).unwrap();
            let kv = cluster_kv(&mut g, k, v, lambda, None, None, None).unwrap();
            let (out, probs, _) = attend(&mut g, q, kv.keys, kv.values, 3.0).unwrap();
            let m = (n as f64 / lambda).ceil() as usize;
            assert_eq!(g.value(probs).shape(), &[n, m]);
            for i in 0..n {
                assert!((g.value(probs).row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
            // Each output row lies in the box spanned by the aggregated values.
            let vals = g.value(kv.values);
            for ch in 0..3 {
                let lo = (0..m).map(|j| vals.row(j)[ch]).fold(f64::INFINITY, f64::min);
                let hi = (0..m).map(|j| vals.row(j)[ch]).fold(f64::NEG_INFINITY, f64::max);
                for i in 0..n {
                    let o = g.value(out).row(i)[ch];
                    assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
                }
            }
        }
    }
}

#[test]
fn two_heads_match_compositional_oracle() {
    for seed in SEEDS {
        let (store, w, mut spec) = layer(seed, 6, 2, vec![2.0]);
        spec.k = Some(3);
        let x = rand_rows(&mut rng(seed + 10), 10, 6, 1.0);
        let mut s = Session::new(&store);
        let xv = s.graph.input(Tensor::from_rows(&x).unwrap()).unwrap();
        let y = mh_clus_attention(&mut s, xv, &w, &spec, 2.0, "attn").unwrap();
        assert_eq!(s.graph.value(y).shape(), &[10, 6]);
        let want = OracleLayer::from_store(&store, &w).forward(&x, &spec);
        assert!(max_abs(&s.graph.value(y).to_rows(), &want) <= 1e-12);
    }
}

#[test]
fn multi_scale_layer_matches_oracle() {
    for seed in SEEDS {
        let (store, w, spec) = layer(seed, 8, 2, vec![4.0, 1.0]);
        let x = rand_rows(&mut rng(seed + 20), 16, 8, 1.0);
        let (out, _) = run_layer(&store, &w, &spec, &Tensor::from_rows(&x).unwrap());
        assert_eq!(out.shape(), &[16, 8]);
        assert!(out.all_finite());
        let want = OracleLayer::from_store(&store, &w).forward(&x, &spec);
        assert!(max_abs(&out.to_rows(), &want) <= 1e-12);
    }
}

#[test]
fn unit_ratio_layer_is_dense_multi_head() {
    for seed in SEEDS {
        for heads in [1, 2, 4] {
            let (store, w, spec) = layer(seed, 8, heads, vec![1.0]);
            assert!(w.score_proj.is_empty());
            let x = rand_rows(&mut rng(seed + 30), 12, 8, 1.0);
            let (out, _) = run_layer(&store, &w, &spec, &Tensor::from_rows(&x).unwrap());
            let want = OracleLayer::from_store(&store, &w).forward(&x, &spec);
            assert!(max_abs(&out.to_rows(), &want) <= 1e-10);
        }
    }
}

#[test]
fn single_head_identity_projection_is_plain_attention() {
    let (mut store, w, spec) = layer(3, 4, 1, vec![1.0]);
    store.set(w.phi, Tensor::identity(4)).unwrap();
    store.set(w.phi_bias, Tensor::zeros(&[4])).unwrap();
    let x = rand_rows(&mut rng(3), 5, 4, 1.0);
    let (out, _) = run_layer(&store, &w, &spec, &Tensor::from_rows(&x).unwrap());
    let q = clustr_oracle::matmul(&x, &store.tensor(w.wq).to_rows());
    let k = clustr_oracle::matmul(&x, &store.tensor(w.wk).to_rows());
    let v = clustr_oracle::matmul(&x, &store.tensor(w.wv).to_rows());
    assert!(max_abs(&out.to_rows(), &clustr_oracle::attention(&q, &k, &v, 4.0)) <= 1e-12);
}

#[test]
fn multi_scale_layer_gradients() {
    for seed in SEEDS {
        let (mut store, w, spec) = layer(seed, 8, 2, vec![4.0, 1.0]);
        let x = rand_tensor(&mut rng(seed + 40), &[16, 8], 1.0);
        let ids = all_params(&store);
        let rep = finite_diff_gradcheck(&mut store, &ids, 1e-5, Coverage::All, |st, g| {
            on_graph(st, g, |s| {
                let xv = s.graph.input(x.clone())?;
                let y = mhms_clus_attention(s, xv, &w, &spec, None, "attn")?;
                weighted_sum(&mut s.graph, y, seed)
            })
        })
        .unwrap();
        assert!(rep.max_rel_err <= 1e-4, "seed {seed}: {rep:?}");
        assert_eq!(rep.params.len(), 7);
    }
}

#[test]
fn measured_products_equal_analytic_counts() {
    for seed in SEEDS {
        let mut r = rng(seed);
        for lambdas in [vec![1.0], vec![4.0], vec![4.0, 1.0], vec![16.0, 4.0], vec![3.0, 2.0]] {
            let n = r.random_range(2..=40);
            let heads = [1, 2, 4][r.random_range(0..3)];
            let (store, w, spec) = layer(seed, 8, heads, lambdas.clone());
            let x = rand_tensor(&mut r, &[n, 8], 1.0);
            let (_, traces) = run_layer(&store, &w, &spec, &x);
            let analytic = attention_macs(n, &spec);
            let trace = &traces[0];
            assert_eq!(trace.measured_macs, analytic.clustered, "n={n} λ={lambdas:?}");
            assert_eq!(trace.kv_tokens, analytic.kv_tokens);
            let want: Vec<usize> = lambdas.iter().map(|&l| (n as f64 / l).ceil() as usize).collect();
            assert_eq!(analytic.kv_tokens, want);
        }
    }
}

#[test]
fn stage_one_ratio_is_one_sixty_fourth() {
    let n = 56 * 56;
    let spec = AttentionSpec::new(4, 1, vec![64.0]).unwrap();
    let macs = attention_macs(n, &spec);
    assert_eq!(macs.kv_tokens, vec![49]);
    assert_eq!(macs.clustered * 64, macs.dense);

    // Instrumented: one clustered and one dense product on real tensors.
    let mut r = rng(5);
    let mut g = Graph::<f64>::new();
    let q = g.input(rand_tensor(&mut r, &[n, 4], 1.0)).unwrap();
    let k = g.input(rand_tensor(&mut r, &[n, 4], 1.0)).unwrap();
    let v = g.input(rand_tensor(&mut r, &[n, 4], 1.0)).unwrap();
    let kv = cluster_kv(&mut g, k, v, 64.0, None, None, None).unwrap();
    let (_, _, clustered) = attend(&mut g, q, kv.keys, kv.values, 4.0).unwrap();
    let (_, _, dense) = attend(&mut g, q, k, v, 4.0).unwrap();
    assert_eq!(clustered.total(), macs.clustered);
    assert_eq!(dense.total(), macs.dense);
    assert_eq!(clustered.score * 64, dense.score);
}

#[test]
fn query_order_equivariance() {
    for seed in SEEDS {
        let mut r = rng(seed);
        let n = 12;
        let q = rand_rows(&mut r, n, 3, 1.0);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let qp: Vec<Vec<f64>> = perm.iter().map(|&i| q[i].clone()).collect();
        let mut g = Graph::<f64>::new();
        let k = g.input(rand_tensor(&mut r, &[n, 3], 1.0)).unwrap();
        let v = g.input(rand_tensor(&mut r, &[n, 3], 1.0)).unwrap();
        let qv = g.input(Tensor::from_rows(&q).unwrap()).unwrap();
        let qpv = g.input(Tensor::from_rows(&qp).unwrap()).unwrap();
        let (a, _) = clus_attention(&mut g, qv, k, v, 3.0, 3.0, None, None).unwrap();
        let (b, _) = clus_attention(&mut g, qpv, k, v, 3.0, 3.0, None, None).unwrap();
        let (a, b) = (g.value(a).to_rows(), g.value(b).to_rows());
        for (pos, &i) in perm.iter().enumerate() {
            assert_eq!(a[i], b[pos]);
        }
    }
}

#[test]
fn grid_pooling_matches_loops() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_f64_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]).unwrap()).unwrap();
    let y = grid_aggregation(&mut g, x, (2, 2), 2, None).unwrap();
    assert_eq!(g.value(y).data(), &[2.5]);
    let same = grid_aggregation(&mut g, x, (2, 2), 1, None).unwrap();
    assert_eq!(same, x);
    assert!(grid_aggregation(&mut g, x, (2, 2), 3, None).is_err());

    for seed in SEEDS {
        let mut r = rng(seed);
        let xs = rand_rows(&mut r, 16, 3, 2.0);
        let logits: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut g = Graph::<f64>::new();
        let xv = g.input(Tensor::from_rows(&xs).unwrap()).unwrap();
        let lv = g.input(Tensor::new(vec![1, 4], logits.clone()).unwrap()).unwrap();
        let y = grid_aggregation(&mut g, xv, (4, 4), 2, Some(lv)).unwrap();
        let w = clustr_oracle::segment_softmax(&logits, &[0; 4]);
        assert!(max_abs(&g.value(y).to_rows(), &clustr_oracle::grid_pool(&xs, 4, 4, 2, &w)) <= 1e-12);
    }
}

#[test]
fn grid_layer_runs_and_counts() {
    let (mut store, _, mut spec) = layer(0, 8, 2, vec![4.0, 1.0]);
    spec.aggregation = Aggregation::Grid;
    let w = AttentionWeights::register(&mut store, "grid", &spec, 0.5).unwrap();
    assert!(w.score_proj.is_empty());
    assert!(w.pool[0].is_some() && w.pool[1].is_none());
    let x = rand_tensor(&mut rng(0), &[16, 8], 1.0);
    let mut s = Session::new(&store);
    let xv = s.graph.input(x).unwrap();
    let y = mhms_clus_attention(&mut s, xv, &w, &spec, Some((4, 4)), "grid").unwrap();
    assert_eq!(s.graph.value(y).shape(), &[16, 8]);
    assert_eq!(s.traces[0].kv_tokens, vec![4, 16]);
    assert_eq!(s.traces[0].measured_macs, attention_macs(16, &spec).clustered);
}

#[test]
fn multi_scale_cluster_widths() {
    for seed in SEEDS {
        let x = rand_tensor(&mut rng(seed), &[8, 3], 1.0);
        let mut g = Graph::<f64>::new();
        let xv = g.input(x.clone()).unwrap();
        let both = multi_scale_cluster(&mut g, xv, &[4.0, 1.0], None, None).unwrap();
        assert_eq!(g.value(both).rows(), 2 + 8);
        assert_eq!(&g.value(both).data()[2 * 3..], x.data());
        let one = multi_scale_cluster(&mut g, xv, &[1.0], None, None).unwrap();
        assert_eq!(g.value(one), &x);
        let two = multi_scale_cluster(&mut g, xv, &[2.0], None, None).unwrap();
        let single = cluster_tokens(&x, 2.0, None, &Tensor::zeros(&[8])).unwrap();
        assert_eq!(g.value(two), &single.tokens);

        let big = rand_tensor(&mut rng(seed), &[40, 2], 1.0);
        let bv = g.input(big).unwrap();
        let lambdas = [16.0, 4.0, 3.0];
        let out = multi_scale_cluster(&mut g, bv, &lambdas, None, None).unwrap();
        let want: usize = lambdas.iter().map(|&l| clusters_for_ratio(40, l)).sum();
        assert_eq!(g.value(out).rows(), want);
        assert_eq!(want, 3 + 10 + 14);
    }
}
