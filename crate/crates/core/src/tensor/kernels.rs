//! Loop kernels shared by forward and backward passes. Reduction order is
//! fixed, so results are bitwise reproducible.

use crate::scalar::Scalar;

/// `c[m,n] = a[m,k] · b[k,n]`
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

/// `c[m,k] = a[m,n] · b[k,n]ᵀ`
pub(crate) fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            c[i * k + j] = acc;
        }
    }
    c
}

/// `c[k,n] = a[m,k]ᵀ · b[m,n]`
pub(crate) fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

pub(crate) fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Softmax along the middle axis of an (outer, len, inner) view.
pub(crate) fn softmax<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[at(j)]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                sum = sum + e;
            }
            for j in 0..len {
                out[at(j)] = out[at(j)] / sum;
            }
        }
    }
    out
}

pub(crate) fn log_softmax<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[at(j)]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                sum = sum + (x[at(j)] - max).exp();
            }
            let lse = max + sum.ln();
            for j in 0..len {
                out[at(j)] = x[at(j)] - lse;
            }
        }
    }
    out
}

pub(crate) fn sum_axis<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for j in 0..len {
            let src = &x[o * len * inner + j * inner..o * len * inner + (j + 1) * inner];
            let dst = &mut out[o * inner..(o + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        }
    }
    out
}

/// Repeats `g[outer, inner]` along a new middle axis of length `len`.
pub(crate) fn expand_axis<T: Scalar>(g: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        for _ in 0..len {
            out.extend_from_slice(&g[o * inner..(o + 1) * inner]);
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh approximation of GELU.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let three = T::lit(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
