//! Raw row-major loops shared by the forward and backward passes.

use crate::Scalar;

/// `c = a · b` for `a: m×k`, `b: k×n`.
///
/// Every output row is accumulated independently in the same order, so a
/// row computed alone is bit-identical to the same row of a larger product.
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (t, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

/// `c = a · bᵀ` for `a: m×k`, `b: n×k`.
pub(crate) fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c.push(dot(arow, brow));
        }
    }
    c
}

/// Eight interleaved partial sums so the loop vectorises.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail = ac
        .remainder()
        .iter()
        .zip(bc.remainder())
        .fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

/// `c = aᵀ · b` for `a: m×k`, `b: m×n`.
pub(crate) fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for (t, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            for (cv, &bv) in c[t * n..(t + 1) * n].iter_mut().zip(brow) {
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

/// Row softmax with max subtraction. With `causal`, row `i` only covers
/// columns `0..=i` and masked entries are exactly zero.
pub(crate) fn softmax_rows<T: Scalar>(x: &[T], rows: usize, cols: usize, causal: bool) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        let width = if causal { (i + 1).min(cols) } else { cols };
        let row = &x[i * cols..i * cols + width];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let orow = &mut out[i * cols..i * cols + width];
        let mut sum = T::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum = sum + *o;
        }
        let inv = T::one() / sum;
        for o in orow.iter_mut() {
            *o = *o * inv;
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Scalar>(y: &[T], g: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); rows * cols];
    for i in 0..rows {
        let yr = &y[i * cols..(i + 1) * cols];
        let gr = &g[i * cols..(i + 1) * cols];
        let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&a, &b)| s + a * b);
        for ((d, &yv), &gv) in dx[i * cols..(i + 1) * cols].iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - dot);
        }
    }
    dx
}

/// Per-row zero-mean, unit-variance normalisation. Returns the output and
/// the per-row reciprocal standard deviation.
pub(crate) fn normalize_rows<T: Scalar>(x: &[T], rows: usize, cols: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let n = T::of(cols as f64);
    let mut out = vec![T::zero(); rows * cols];
    let mut rstd = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let mean = row.iter().fold(T::zero(), |s, &v| s + v) / n;
        let var = row
            .iter()
            .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
            / n;
        let r = T::one() / (var + eps).sqrt();
        for (o, &v) in out[i * cols..(i + 1) * cols].iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
        rstd.push(r);
    }
    (out, rstd)
}

pub(crate) fn normalize_backward<T: Scalar>(
    y: &[T],
    g: &[T],
    rstd: &[T],
    rows: usize,
    cols: usize,
) -> Vec<T> {
    let n = T::of(cols as f64);
    let mut dx = vec![T::zero(); rows * cols];
    for i in 0..rows {
        let yr = &y[i * cols..(i + 1) * cols];
        let gr = &g[i * cols..(i + 1) * cols];
        let mean_g = gr.iter().fold(T::zero(), |s, &v| s + v) / n;
        let mean_gy = yr.iter().zip(gr).fold(T::zero(), |s, (&a, &b)| s + a * b) / n;
        for ((d, &yv), &gv) in dx[i * cols..(i + 1) * cols].iter_mut().zip(yr).zip(gr) {
            *d = rstd[i] * (gv - mean_g - yv * mean_gy);
        }
    }
    dx
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln Σ exp(row)` computed with max subtraction.
pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let sum = row.iter().fold(T::zero(), |s, &v| s + (v - max).exp());
    max + sum.ln()
}
