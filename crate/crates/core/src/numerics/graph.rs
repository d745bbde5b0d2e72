//! Reverse-mode differentiation over a fixed vocabulary of tensor ops.
//!
//! A [`Graph`] is an append-only tape: every op evaluates eagerly, stores its
//! output and remembers its inputs. [`Graph::backward`] walks the tape in
//! reverse and returns the gradient of a scalar node with respect to every
//! node that depends on a parameter.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, Unfold};
use crate::numerics::{ParamId, ParamStore, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
        bias: Var,
    },
    Gelu(Var),
    SegmentSoftmax {
        x: Var,
        labels: Vec<usize>,
    },
    SegmentWeightedSum {
        x: Var,
        w: Var,
        labels: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    Unfold {
        x: Var,
        geom: Unfold,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_leaves: HashMap<ParamId, Var>,
    mults: u64,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<S: std::fmt::Debug>(op: &str, a: S, b: S) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_leaves: HashMap::new(),
            mults: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scalar multiplications performed by forward matrix products so far.
    pub fn mults(&self) -> u64 {
        self.mults
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input; gradients are not tracked through it.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    /// Binds a parameter; repeated calls for the same id share one leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_leaves.get(&id) {
            return Ok(v);
        }
        let v = self.push(store.tensor(id).clone(), Op::Param, true)?;
        self.param_leaves.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        if av.rank() != 2 || bv.rank() != 2 || bv.rows() != k {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); n * m];
        kernels::gemm_nn(av.data(), bv.data(), &mut out, n, k, m);
        self.mults += (n * k * m) as u64;
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), needs)
    }

    /// a · bᵀ
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k, m) = (av.rows(), av.cols(), bv.rows());
        if av.rank() != 2 || bv.rank() != 2 || bv.cols() != k {
            return Err(shape_err("matmul_nt", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); n * m];
        kernels::gemm_nt(av.data(), bv.data(), &mut out, n, k, m);
        self.mults += (n * k * m) as u64;
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![n, m], out)?, Op::MatMulNT(a, b), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), needs)
    }

    /// x[N×C] + b[C] broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = xv.cols();
        if bv.len() != c {
            return Err(shape_err("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o = *o + bb;
            }
        }
        let needs = self.needs(x) || self.needs(b);
        self.push(out, Op::AddBias(x, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, c), needs)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax_rows: NaN input".into()));
        }
        let mut out = Tensor::zeros(xv.shape());
        kernels::softmax_rows(xv.data(), out.data_mut(), xv.cols());
        let needs = self.needs(x);
        self.push(out, Op::SoftmaxRows(x), needs)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        if c == 0 || self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(shape_err("layer_norm", xv.shape(), self.value(gain).shape()));
        }
        let cn = T::lit(c as f64);
        let mut xhat = vec![T::zero(); n * c];
        let mut rstd = vec![T::zero(); n];
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * r;
            }
        }
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            for j in 0..c {
                out[i * c + j] = xhat[i * c + j] * gv[j] + bv[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                xhat,
                rstd,
                bias,
            },
            needs,
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(kernels::gelu);
        let needs = self.needs(x);
        self.push(out, Op::Gelu(x), needs)
    }

    /// Softmax of the flattened values of `x` within each label group.
    pub fn segment_softmax(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != labels.len() {
            return Err(shape_err("segment_softmax", xv.len(), labels.len()));
        }
        let m = labels.iter().copied().max().map_or(0, |l| l + 1);
        let mut top = vec![T::neg_infinity(); m];
        for (&v, &l) in xv.data().iter().zip(labels) {
            top[l] = top[l].max(v);
        }
        let mut z = vec![T::zero(); m];
        let mut out: Vec<T> = xv
            .data()
            .iter()
            .zip(labels)
            .map(|(&v, &l)| {
                let e = (v - top[l]).exp();
                z[l] = z[l] + e;
                e
            })
            .collect();
        for (o, &l) in out.iter_mut().zip(labels) {
            *o = *o / z[l];
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let needs = self.needs(x);
        self.push(
            out,
            Op::SegmentSoftmax {
                x,
                labels: labels.to_vec(),
            },
            needs,
        )
    }

    /// Row `j` of the result is Σ w[i]·x[i] over tokens with label `j`.
    pub fn segment_weighted_sum(&mut self, x: Var, labels: &[usize], w: Var, m: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let out = segment_weighted_sum_values(xv, labels, wv, m)?;
        let needs = self.needs(x) || self.needs(w);
        self.push(
            out,
            Op::SegmentWeightedSum {
                x,
                w,
                labels: labels.to_vec(),
            },
            needs,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        if start + len > c {
            return Err(Error::Shape(format!(
                "slice_cols: [{start}, {}) out of {c} columns",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![n, len], out)?;
        let needs = self.needs(x);
        self.push(out, Op::SliceCols { x, start }, needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != n) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![n, total], out)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != c) {
            return Err(Error::Shape("concat_rows: column counts differ".into()));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rows = out.len() / c.max(1);
        let out = Tensor::new(vec![rows, c], out)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), needs)
    }

    /// Column means, as a `[1×C]` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        let inv = T::one() / T::lit(n as f64);
        let mut out = vec![T::zero(); c];
        for i in 0..n {
            for (o, &v) in out.iter_mut().zip(xv.row(i)) {
                *o = *o + v;
            }
        }
        out.iter_mut().for_each(|o| *o = *o * inv);
        let out = Tensor::new(vec![1, c], out)?;
        let needs = self.needs(x);
        self.push(out, Op::MeanRows(x), needs)
    }

    /// Overlapping-window unfold of an `h×w` token grid (im2col).
    pub fn unfold(&mut self, x: Var, geom: Unfold) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != geom.h * geom.w || xv.cols() != geom.c {
            return Err(Error::Geometry(format!(
                "unfold expects {}×{} tokens of width {}, got {:?}",
                geom.h,
                geom.w,
                geom.c,
                xv.shape()
            )));
        }
        if geom.kernel == 0 || geom.stride == 0 || geom.h + 2 * geom.pad < geom.kernel || geom.w + 2 * geom.pad < geom.kernel {
            return Err(Error::Geometry(format!("invalid window geometry {geom:?}")));
        }
        let data = geom.forward(xv.data());
        let out = Tensor::new(vec![geom.out_h() * geom.out_w(), geom.patch_len()], data)?;
        let needs = self.needs(x);
        self.push(out, Op::Unfold { x, geom }, needs)
    }

    /// Picks flattened entries of `x` by index; the result is a vector.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if idx.iter().any(|&i| i >= xv.len()) {
            return Err(Error::Shape("gather: index out of range".into()));
        }
        let out = Tensor::vector(idx.iter().map(|&i| xv.data()[i]).collect());
        let needs = self.needs(x);
        self.push(
            out,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            needs,
        )
    }

    /// Mean cross-entropy of row-wise logits against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, k) = (lv.rows(), lv.cols());
        if targets.len() != b || targets.iter().any(|&t| t >= k) {
            return Err(Error::Shape("cross_entropy: bad targets".into()));
        }
        let mut probs = vec![T::zero(); b * k];
        kernels::softmax_rows(lv.data(), &mut probs, k);
        let mut loss = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            let top = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = top + row.iter().map(|&v| (v - top).exp()).sum::<T>().ln();
            loss = loss + lse - row[t];
        }
        loss = loss / T::lit(b as f64);
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        self.push(out, Op::Reshape(x), needs)
    }

    /// Gradients of the scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let params = self.param_leaves.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut send = |v: Var, t: Tensor<T>| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); n * k];
                    kernels::gemm_nt(gd, bv.data(), &mut ga, n, m, k);
                    send(*a, Tensor::new(av.shape().to_vec(), ga).unwrap());
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); k * m];
                    kernels::gemm_tn(av.data(), gd, &mut gb, n, k, m);
                    send(*b, Tensor::new(bv.shape().to_vec(), gb).unwrap());
                }
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.rows());
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); n * k];
                    kernels::gemm_nn(gd, bv.data(), &mut ga, n, m, k);
                    send(*a, Tensor::new(av.shape().to_vec(), ga).unwrap());
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); m * k];
                    kernels::gemm_tn(gd, av.data(), &mut gb, n, m, k);
                    send(*b, Tensor::new(bv.shape().to_vec(), gb).unwrap());
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::AddBias(x, b) => {
                send(*x, g.clone());
                let bv = self.value(*b);
                let c = bv.len();
                let mut gb = vec![T::zero(); c];
                for row in gd.chunks(c) {
                    for (o, &v) in gb.iter_mut().zip(row) {
                        *o = *o + v;
                    }
                }
                send(*b, Tensor::new(bv.shape().to_vec(), gb).unwrap());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = gd.iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                let gb = gd.iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                send(*a, Tensor::new(av.shape().to_vec(), ga).unwrap());
                send(*b, Tensor::new(bv.shape().to_vec(), gb).unwrap());
            }
            Op::Scale(x, c) => send(*x, g.map(|v| v * *c)),
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut gx = vec![T::zero(); y.len()];
                for ((yr, gr), or) in y.data().chunks(c).zip(gd.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yy), &gg) in or.iter_mut().zip(yr).zip(gr) {
                        *o = yy * (gg - dot);
                    }
                }
                send(*x, Tensor::new(y.shape().to_vec(), gx).unwrap());
            }
            Op::LayerNorm {
                x,
                gain,
                xhat,
                rstd,
                bias,
            } => {
                let gv = self.value(*gain);
                let c = gv.len();
                let n = xhat.len() / c;
                let cn = T::lit(c as f64);
                let mut ggain = vec![T::zero(); c];
                let mut gbias = vec![T::zero(); c];
                let mut gx = vec![T::zero(); n * c];
                for i in 0..n {
                    let gr = &gd[i * c..(i + 1) * c];
                    let xr = &xhat[i * c..(i + 1) * c];
                    let mut mean_g = T::zero();
                    let mut mean_gx = T::zero();
                    for j in 0..c {
                        ggain[j] = ggain[j] + gr[j] * xr[j];
                        gbias[j] = gbias[j] + gr[j];
                        let gh = gr[j] * gv.data()[j];
                        mean_g = mean_g + gh;
                        mean_gx = mean_gx + gh * xr[j];
                    }
                    mean_g = mean_g / cn;
                    mean_gx = mean_gx / cn;
                    for j in 0..c {
                        let gh = gr[j] * gv.data()[j];
                        gx[i * c + j] = rstd[i] * (gh - mean_g - xr[j] * mean_gx);
                    }
                }
                send(*x, Tensor::new(self.value(*x).shape().to_vec(), gx).unwrap());
                send(*gain, Tensor::new(gv.shape().to_vec(), ggain).unwrap());
                send(*bias, Tensor::new(self.value(*bias).shape().to_vec(), gbias).unwrap());
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let gx = xv.data().iter().zip(gd).map(|(&v, &gg)| gg * kernels::gelu_grad(v)).collect();
                send(*x, Tensor::new(xv.shape().to_vec(), gx).unwrap());
            }
            Op::SegmentSoftmax { x, labels } => {
                let y = node.value.data();
                let m = labels.iter().copied().max().map_or(0, |l| l + 1);
                let mut dot = vec![T::zero(); m];
                for ((&yy, &gg), &l) in y.iter().zip(gd).zip(labels) {
                    dot[l] = dot[l] + yy * gg;
                }
                let gx = y
                    .iter()
                    .zip(gd)
                    .zip(labels)
                    .map(|((&yy, &gg), &l)| yy * (gg - dot[l]))
                    .collect();
                send(*x, Tensor::new(node.value.shape().to_vec(), gx).unwrap());
            }
            Op::SegmentWeightedSum { x, w, labels } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let c = xv.cols();
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); xv.len()];
                    for (i, &l) in labels.iter().enumerate() {
                        let wi = wv.data()[i];
                        for ch in 0..c {
                            gx[i * c + ch] = wi * gd[l * c + ch];
                        }
                    }
                    send(*x, Tensor::new(xv.shape().to_vec(), gx).unwrap());
                }
                if self.needs(*w) {
                    let gw = labels
                        .iter()
                        .enumerate()
                        .map(|(i, &l)| xv.row(i).iter().zip(&gd[l * c..(l + 1) * c]).map(|(&a, &b)| a * b).sum())
                        .collect();
                    send(*w, Tensor::new(wv.shape().to_vec(), gw).unwrap());
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (n, c) = (xv.rows(), xv.cols());
                let len = node.value.cols();
                let mut gx = vec![T::zero(); n * c];
                for i in 0..n {
                    gx[i * c + start..i * c + start + len].copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                send(*x, Tensor::new(xv.shape().to_vec(), gx).unwrap());
            }
            Op::ConcatCols(parts) => {
                let n = node.value.rows();
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let c = pv.cols();
                    let mut gp = Vec::with_capacity(n * c);
                    for i in 0..n {
                        gp.extend_from_slice(&gd[i * total + off..i * total + off + c]);
                    }
                    off += c;
                    send(p, Tensor::new(pv.shape().to_vec(), gp).unwrap());
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let len = pv.len();
                    send(p, Tensor::new(pv.shape().to_vec(), gd[off..off + len].to_vec()).unwrap());
                    off += len;
                }
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let n = xv.rows();
                let inv = T::one() / T::lit(n as f64);
                let mut gx = Vec::with_capacity(xv.len());
                for _ in 0..n {
                    gx.extend(gd.iter().map(|&v| v * inv));
                }
                send(*x, Tensor::new(xv.shape().to_vec(), gx).unwrap());
            }
            Op::Unfold { x, geom } => {
                let gx = geom.backward(gd);
                send(*x, Tensor::new(self.value(*x).shape().to_vec(), gx).unwrap());
            }
            Op::Gather { x, idx } => {
                let xv = self.value(*x);
                let mut gx = vec![T::zero(); xv.len()];
                for (&i, &gg) in idx.iter().zip(gd) {
                    gx[i] = gx[i] + gg;
                }
                send(*x, Tensor::new(xv.shape().to_vec(), gx).unwrap());
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let lv = self.value(*logits);
                let k = lv.cols();
                let scale = gd[0] / T::lit(targets.len() as f64);
                let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    gl[i * k + t] = gl[i * k + t] - scale;
                }
                send(*logits, Tensor::new(lv.shape().to_vec(), gl).unwrap());
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                send(*x, Tensor::filled(xv.shape(), gd[0]));
            }
            Op::Reshape(x) => {
                let xv = self.value(*x);
                send(*x, g.clone().reshape(xv.shape().to_vec()).unwrap());
            }
        }
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "input",
        Op::Param => "parameter",
        Op::MatMul(..) => "matmul",
        Op::MatMulNT(..) => "matmul_nt",
        Op::Add(..) => "add",
        Op::AddBias(..) => "add_bias",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::SoftmaxRows(_) => "softmax_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Gelu(_) => "gelu",
        Op::SegmentSoftmax { .. } => "segment_softmax",
        Op::SegmentWeightedSum { .. } => "segment_weighted_sum",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols(_) => "concat_cols",
        Op::ConcatRows(_) => "concat_rows",
        Op::MeanRows(_) => "mean_rows",
        Op::Unfold { .. } => "unfold",
        Op::Gather { .. } => "gather",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Sum(_) => "sum",
        Op::Reshape(_) => "reshape",
    }
}

pub(crate) fn segment_weighted_sum_values<T: Real>(
    x: &Tensor<T>,
    labels: &[usize],
    w: &Tensor<T>,
    m: usize,
) -> Result<Tensor<T>> {
    let (n, c) = (x.rows(), x.cols());
    if labels.len() != n || w.len() != n {
        return Err(Error::Shape(format!(
            "segment_weighted_sum: {n} tokens, {} labels, {} weights",
            labels.len(),
            w.len()
        )));
    }
    let mut counts = vec![0usize; m];
    for &l in labels {
        if l >= m {
            return Err(Error::Contract(format!("label {l} outside [0, {m})")));
        }
        counts[l] += 1;
    }
    if let Some(j) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Contract(format!("segment {j} is empty")));
    }
    let mut out = vec![T::zero(); m * c];
    for (i, &l) in labels.iter().enumerate() {
        let wi = w.data()[i];
        for (o, &v) in out[l * c..(l + 1) * c].iter_mut().zip(x.row(i)) {
            *o = *o + wi * v;
        }
    }
    Tensor::new(vec![m, c], out)
}

/// Output of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.get(*v))
    }

    /// Adds the parameter gradients into the store's `grad` buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(id, v) in &self.params {
            if let Some(g) = self.get(v) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}
