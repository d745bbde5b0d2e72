//! Tape-free versions of the elementary ops, for callers that only need
//! values (clustering, oracle comparisons, inference-only paths).

use crate::error::{Error, Result};
use crate::numerics::graph::segment_weighted_sum_values;
use crate::numerics::kernels;
use crate::numerics::{Real, Tensor};

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
        return Err(Error::Shape(format!(
            "matmul: {:?} · {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![T::zero(); n * m];
    kernels::gemm_nn(a.data(), b.data(), &mut out, n, k, m);
    Tensor::new(vec![n, m], out)
}

pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("softmax_rows: NaN input".into()));
    }
    let mut out = Tensor::zeros(x.shape());
    kernels::softmax_rows(x.data(), out.data_mut(), x.cols());
    Ok(out)
}

pub fn layer_norm<T: Real>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let c = x.cols();
    if c == 0 || gain.len() != c || bias.len() != c {
        return Err(Error::Shape(format!(
            "layer_norm: input {:?}, gain {:?}, bias {:?}",
            x.shape(),
            gain.shape(),
            bias.shape()
        )));
    }
    let cn = T::lit(c as f64);
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().copied().sum::<T>() / cn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
        let r = T::one() / (var + eps).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * r * gain.data()[j] + bias.data()[j];
        }
    }
    Ok(out)
}

pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(kernels::gelu)
}

pub fn segment_weighted_sum<T: Real>(
    x: &Tensor<T>,
    labels: &[usize],
    weights: &Tensor<T>,
    m: usize,
) -> Result<Tensor<T>> {
    segment_weighted_sum_values(x, labels, weights, m)
}
