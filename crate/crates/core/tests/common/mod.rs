#![allow(dead_code)]

use clustr_core::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_rows(rng: &mut ChaCha8Rng, n: usize, c: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..c).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn max_abs(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

use clustr_core::attention::Session;
use clustr_core::numerics::{Graph, ParamStore};
use clustr_core::{Result, Var};

/// Runs `f` in a session that records onto `g`, for use inside gradcheck
/// closures.
pub fn on_graph<F>(store: &ParamStore<f64>, g: &mut Graph<f64>, f: F) -> Result<Var>
where
    F: FnOnce(&mut Session<'_, f64>) -> Result<Var>,
{
    let mut s = Session::new(store);
    std::mem::swap(&mut s.graph, g);
    let out = f(&mut s);
    std::mem::swap(&mut s.graph, g);
    out
}

/// Σ out ⊙ R for a seeded random R of matching shape.
pub fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let r = g.input(rand_tensor(&mut rng(seed), &shape, 1.0))?;
    let p = g.mul(out, r)?;
    g.sum(p)
}

pub fn cols(x: &[Vec<f64>], start: usize, len: usize) -> Vec<Vec<f64>> {
    x.iter().map(|r| r[start..start + len].to_vec()).collect()
}

pub fn hcat(parts: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    (0..parts[0].len())
        .map(|i| parts.iter().flat_map(|p| p[i].iter().copied()).collect())
        .collect()
}
