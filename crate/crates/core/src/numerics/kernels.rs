//! Slice-level kernels shared by the pure ops and the tape.

use crate::numerics::Real;

/// out[n×m] += a[n×k] · b[k×m]
pub fn gemm_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// out[n×m] += a[n×k] · b[m×k]ᵀ
pub fn gemm_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * m + j] = out[i * m + j] + acc;
        }
    }
}

/// out[k×m] += a[n×k]ᵀ · b[n×m]
pub fn gemm_tn<T: Real>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for r in 0..n {
        let brow = &b[r * m..(r + 1) * m];
        for p in 0..k {
            let av = a[r * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Row softmax with per-row max subtraction.
pub fn softmax_rows<T: Real>(x: &[T], out: &mut [T], cols: usize) {
    for (xr, orow) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let top = xr.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (o, &v) in orow.iter_mut().zip(xr) {
            *o = (v - top).exp();
            z = z + *o;
        }
        for o in orow.iter_mut() {
            *o = *o / z;
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub fn gelu<T: Real>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    let u = k * (x + c * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    let three = T::lit(3.0);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + three * c * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Shape bookkeeping for a strided, zero-padded square-window unfold of an
/// `h×w` grid of `c`-channel tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Unfold {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Unfold {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.c
    }

    /// Calls `f(out_row, col_offset, src_token)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        for oy in 0..oh {
            for ox in 0..ow {
                let orow = oy * ow + ox;
                for ky in 0..self.kernel {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.kernel {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let src = iy as usize * self.w + ix as usize;
                        f(orow, (ky * self.kernel + kx) * self.c, src);
                    }
                }
            }
        }
    }

    pub fn forward<T: Real>(&self, x: &[T]) -> Vec<T> {
        let plen = self.patch_len();
        let c = self.c;
        let mut out = vec![T::zero(); self.out_h() * self.out_w() * plen];
        self.for_each_tap(|orow, off, src| {
            out[orow * plen + off..orow * plen + off + c].copy_from_slice(&x[src * c..(src + 1) * c]);
        });
        out
    }

    pub fn backward<T: Real>(&self, g: &[T]) -> Vec<T> {
        let plen = self.patch_len();
        let c = self.c;
        let mut gx = vec![T::zero(); self.h * self.w * c];
        self.for_each_tap(|orow, off, src| {
            for ch in 0..c {
                gx[src * c + ch] = gx[src * c + ch] + g[orow * plen + off + ch];
            }
        });
        gx
    }
}
