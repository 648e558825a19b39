//! Hot numeric kernels shared by the graph executor.
//!
//! Everything here is single-threaded and written so the autovectorizer can
//! do its job: contiguous row access, axpy-style inner loops, no bounds
//! checks in the hot path beyond the slice splits.

use super::Scalar;

/// `out = a * b` for row-major `a: (m, k)`, `b: (k, n)`, `out: (m, n)`.
/// `out` is overwritten.
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(T::ZERO);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row.iter()) {
                *o = a_ip.mul_add(b_pj, *o);
            }
        }
    }
}

/// `out = a^T * b` for `a: (k, m)`, `b: (k, n)`, `out: (m, n)`.
/// Transposes `a` into `scratch` (length `m * k`) then runs the nn kernel;
/// the copy is O(mk) against the O(mkn) multiply.
pub fn matmul_tn<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    scratch: &mut Vec<T>,
    k: usize,
    m: usize,
    n: usize,
) {
    scratch.clear();
    scratch.resize(m * k, T::ZERO);
    transpose_2d(a, scratch, k, m);
    matmul_nn(scratch, b, out, m, k, n);
}

/// `out = a * b^T` for `a: (m, k)`, `b: (n, k)`, `out: (m, n)`.
pub fn matmul_nt<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    scratch: &mut Vec<T>,
    m: usize,
    k: usize,
    n: usize,
) {
    scratch.clear();
    scratch.resize(k * n, T::ZERO);
    transpose_2d(b, scratch, n, k);
    matmul_nn(a, scratch, out, m, k, n);
}

/// Transpose a row-major `(rows, cols)` matrix into `out` as `(cols, rows)`.
pub fn transpose_2d<T: Copy>(src: &[T], out: &mut [T], rows: usize, cols: usize) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for r in 0..rows {
        let row = &src[r * cols..(r + 1) * cols];
        for (c, &v) in row.iter().enumerate() {
            out[c * rows + r] = v;
        }
    }
}

/// Numerically careful softmax of one row, in place: subtract the max, then
/// exponentiate and normalize. Safe for arbitrarily large logits.
pub fn softmax_row<T: Scalar>(row: &mut [T]) {
    let mut max = row[0];
    for &v in row.iter() {
        max = max.maximum(v);
    }
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// log(sum(exp(row))) with the max factored out.
pub fn logsumexp_row<T: Scalar>(row: &[T]) -> T {
    let mut max = row[0];
    for &v in row.iter() {
        max = max.maximum(v);
    }
    let mut sum = T::ZERO;
    for &v in row.iter() {
        sum += (v - max).exp();
    }
    max + sum.ln()
}
