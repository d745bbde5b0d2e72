mod common;

use clustr_core::numerics::gradcheck::relative_error;
use clustr_core::numerics::{finite_diff_gradcheck, ops, Coverage, Graph, Init, ParamStore, Tensor};
use common::{rand_rows, rand_tensor, rng};
use proptest::prelude::*;

const GRAD_TOL: f64 = 1e-4;

/// Σ (f(params) ⊙ R) for a fixed random R, so that no gradient cancels.
fn weighted_loss(g: &mut Graph<f64>, out: clustr_core::Var, seed: u64) -> clustr_core::Result<clustr_core::Var> {
    let shape = g.value(out).shape().to_vec();
    let r = g.input(rand_tensor(&mut rng(seed), &shape, 1.0))?;
    let p = g.mul(out, r)?;
    g.sum(p)
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut store = ParamStore::<f64>::new(1);
    let a = store.register("a", &[5, 4], Init::Normal(1.0)).unwrap();
    let b = store.register("b", &[4, 3], Init::Normal(1.0)).unwrap();
    let rep = finite_diff_gradcheck(&mut store, &[a, b], 1e-5, Coverage::All, |st, g| {
        let (av, bv) = (g.param(st, a)?, g.param(st, b)?);
        let y = g.matmul(av, bv)?;
        g.sum(y)
    })
    .unwrap();
    assert!(rep.max_rel_err <= 1e-6, "{rep:?}");
}

#[test]
fn matmul_nt_and_layer_norm_gradients() {
    let mut store = ParamStore::<f64>::new(2);
    let x = store.register("x", &[3, 8], Init::Normal(1.0)).unwrap();
    let y = store.register("y", &[5, 8], Init::Normal(1.0)).unwrap();
    let gain = store.register("gain", &[8], Init::Normal(1.0)).unwrap();
    let bias = store.register("bias", &[8], Init::Normal(1.0)).unwrap();
    let rep = finite_diff_gradcheck(&mut store, &[x, y, gain, bias], 1e-5, Coverage::All, |st, g| {
        let (xv, yv) = (g.param(st, x)?, g.param(st, y)?);
        let (gv, bv) = (g.param(st, gain)?, g.param(st, bias)?);
        let n = g.layer_norm(xv, gv, bv, 1e-5)?;
        let s = g.matmul_nt(n, yv)?;
        let s = g.softmax_rows(s)?;
        weighted_loss(g, s, 9)
    })
    .unwrap();
    assert!(rep.max_rel_err <= GRAD_TOL, "{rep:?}");
}

#[test]
fn gelu_gradient_on_random_points() {
    let mut store = ParamStore::<f64>::new(3);
    let x = store.register("x", &[16], Init::Normal(2.0)).unwrap();
    let rep = finite_diff_gradcheck(&mut store, &[x], 1e-5, Coverage::All, |st, g| {
        let v = g.param(st, x)?;
        let y = g.gelu(v)?;
        g.sum(y)
    })
    .unwrap();
    assert!(rep.max_rel_err <= 1e-5, "{rep:?}");
}

#[test]
fn segment_sum_matches_loop_oracle_and_gradients() {
    let mut r = rng(4);
    let x = rand_rows(&mut r, 6, 3, 2.0);
    let labels = [1, 0, 1, 1, 0, 1];
    let w = [0.2, 0.5, 0.3, 0.1, 0.5, 0.4];
    let got = ops::segment_weighted_sum(
        &Tensor::from_rows(&x).unwrap(),
        &labels,
        &Tensor::vector(w.to_vec()),
        2,
    )
    .unwrap();
    assert_eq!(got.to_rows(), clustr_oracle::segment_sum(&x, &labels, &w, 2));

    let mut store = ParamStore::<f64>::new(5);
    let xp = store.insert("x", Tensor::from_rows(&x).unwrap()).unwrap();
    let wp = store.insert("w", Tensor::vector(w.to_vec())).unwrap();
    let rep = finite_diff_gradcheck(&mut store, &[xp, wp], 1e-5, Coverage::All, |st, g| {
        let (xv, wv) = (g.param(st, xp)?, g.param(st, wp)?);
        let y = g.segment_weighted_sum(xv, &labels, wv, 2)?;
        weighted_loss(g, y, 10)
    })
    .unwrap();
    assert!(rep.max_rel_err <= GRAD_TOL, "{rep:?}");
}

#[test]
fn structural_ops_gradients() {
    // unfold, slice, concat, mean, gather, segment softmax, cross-entropy
    let mut store = ParamStore::<f64>::new(6);
    let x = store.register("x", &[16, 2], Init::Normal(1.0)).unwrap();
    let w = store.register("w", &[18, 3], Init::Normal(1.0)).unwrap();
    let logits = store.register("logits", &[1, 4], Init::Normal(1.0)).unwrap();
    let geom = clustr_core::numerics::kernels::Unfold {
        h: 4,
        w: 4,
        c: 2,
        kernel: 3,
        stride: 2,
        pad: 1,
    };
    let rep = finite_diff_gradcheck(&mut store, &[x, w, logits], 1e-5, Coverage::All, |st, g| {
        let xv = g.param(st, x)?;
        let cols = g.unfold(xv, geom)?;
        let wv = g.param(st, w)?;
        let y = g.matmul(cols, wv)?;
        let a = g.slice_cols(y, 0, 2)?;
        let b = g.slice_cols(y, 1, 2)?;
        let cat = g.concat_cols(&[a, b])?;
        let c0 = g.slice_cols(cat, 1, 2)?;
        let stacked = g.concat_rows(&[c0, b])?;
        let lv = g.param(st, logits)?;
        let pw = g.softmax_rows(lv)?;
        let per = g.gather(pw, &[0, 1, 2, 3, 0, 1, 2, 3])?;
        let pooled = g.segment_weighted_sum(stacked, &[0, 0, 1, 1, 2, 2, 3, 3], per, 4)?;
        let s = g.slice_cols(pooled, 0, 1)?;
        let s = g.segment_softmax(s, &[0, 1, 0, 1])?;
        let s = g.reshape(s, vec![4, 1])?;
        let both = g.concat_cols(&[pooled, s])?;
        let m = g.mean_rows(both)?;
        let m = g.reshape(m, vec![1, 3])?;
        g.cross_entropy(m, &[2])
    })
    .unwrap();
    assert!(rep.max_rel_err <= GRAD_TOL, "{rep:?}");
}

#[test]
fn singleton_segments_are_bitwise_identity() {
    let mut r = rng(7);
    let x = rand_tensor(&mut r, &[9, 5], 100.0);
    let labels: Vec<usize> = (0..9).collect();
    let y = ops::segment_weighted_sum(&x, &labels, &Tensor::filled(&[9], 1.0), 9).unwrap();
    assert_eq!(y, x);
}

#[test]
fn layer_norm_rows_are_centered() {
    let x = rand_tensor(&mut rng(8), &[3, 8], 5.0);
    let y = ops::layer_norm(&x, &Tensor::filled(&[8], 1.0), &Tensor::zeros(&[8]), 1e-5).unwrap();
    for i in 0..3 {
        let mean: f64 = y.row(i).iter().sum::<f64>() / 8.0;
        assert!(mean.abs() <= 1e-7);
    }
}

#[test]
fn relative_error_guard() {
    assert_eq!(relative_error(0.0, 0.0), 0.0);
    assert!(relative_error(1.0, 1.0 + 1e-9) < 1e-8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>()) {
        let x = rand_tensor(&mut rng(seed), &[rows, cols], 1e3);
        let y = ops::softmax_rows(&x).unwrap();
        for i in 0..rows {
            let s: f64 = y.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(y.row(i).iter().all(|&v| v >= 0.0));
        }
        let y32 = ops::softmax_rows(&x.convert::<f32>()).unwrap();
        for i in 0..rows {
            let s: f32 = y32.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn ops_stay_finite_for_bounded_inputs(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = rand_tensor(&mut r, &[4, 6], 1e3);
        let w = rand_tensor(&mut r, &[6, 3], 1e3);
        prop_assert!(ops::matmul(&x, &w).unwrap().all_finite());
        prop_assert!(ops::softmax_rows(&x).unwrap().all_finite());
        prop_assert!(ops::gelu(&x).all_finite());
        let ln = ops::layer_norm(&x, &Tensor::filled(&[6], 1.0), &Tensor::zeros(&[6]), 1e-5).unwrap();
        prop_assert!(ln.all_finite());
    }

    #[test]
    fn ctr1_round_trip(rows in 0usize..5, cols in 1usize..5, seed in any::<u64>()) {
        let t = rand_tensor(&mut rng(seed), &[rows, cols], 1e6);
        let mut buf = Vec::new();
        clustr_core::numerics::io::write_tensor(&mut buf, &t).unwrap();
        prop_assert_eq!(buf.len(), 4 + 4 + 8 + 8 * rows * cols);
        let back: Tensor<f64> = clustr_core::numerics::io::read_tensor(&buf[..]).unwrap();
        prop_assert_eq!(back, t);
    }
}

/// Randomized backward-vs-finite-difference check for every differentiable
/// op kind, repeated over three seeds.
#[test]
fn op_gradients_over_three_seeds() {
    for seed in [11u64, 22, 33] {
        let mut store = ParamStore::<f64>::new(seed);
        let x = store.register("x", &[4, 6], Init::Normal(1.0)).unwrap();
        let w = store.register("w", &[6, 6], Init::Normal(0.5)).unwrap();
        let gain = store.register("gain", &[6], Init::Normal(1.0)).unwrap();
        let bias = store.register("bias", &[6], Init::Normal(1.0)).unwrap();
        let sw = store.register("sw", &[4], Init::Normal(1.0)).unwrap();
        let rep = finite_diff_gradcheck(&mut store, &[x, w, gain, bias, sw], 1e-5, Coverage::All, |st, g| {
            let xv = g.param(st, x)?;
            let wv = g.param(st, w)?;
            let h = g.matmul(xv, wv)?;
            let (gv, bv) = (g.param(st, gain)?, g.param(st, bias)?);
            let h = g.layer_norm(h, gv, bv, 1e-5)?;
            let h = g.gelu(h)?;
            let s = g.param(st, sw)?;
            let wts = g.segment_softmax(s, &[0, 1, 0, 1])?;
            let agg = g.segment_weighted_sum(h, &[0, 1, 0, 1], wts, 2)?;
            weighted_loss(g, agg, seed)
        })
        .unwrap();
        assert!(rep.max_rel_err <= GRAD_TOL, "seed {seed}: {rep:?}");
    }
}
