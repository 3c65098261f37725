//! Dense matrix kernels over row-major slices.

use crate::exec;

// matrixmultiply computes c = alpha * a * b + beta * c with explicit strides.
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].fill(0.0);
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices sized for the given dimensions and strides;
    // the debug assertions in the public wrappers check this.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c (m×n) = a (m×k) · b (k×n)`.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    exec::for_each_row_chunk(c, n, |r0, chunk| {
        let rows = chunk.len() / n;
        let a = &a[r0 * k..(r0 + rows) * k];
        dgemm(rows, k, n, a, (k as isize, 1), b, (n as isize, 1), chunk);
    });
}

/// `c (m×n) = a (m×k) · bᵀ` where `b` is `n×k`.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    exec::for_each_row_chunk(c, n, |r0, chunk| {
        let rows = chunk.len() / n;
        let a = &a[r0 * k..(r0 + rows) * k];
        dgemm(rows, k, n, a, (k as isize, 1), b, (1, k as isize), chunk);
    });
}

/// `c (m×n) = aᵀ · b` where `a` is `k×m` and `b` is `k×n`. The contraction
/// runs over the (long) row dimension, so partial products are summed in chunk
/// order.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let partials = exec::map_row_ranges(k, |s, e| {
        let mut p = vec![0.0; m * n];
        dgemm(
            m,
            e - s,
            n,
            &a[s * m..e * m],
            (1, m as isize),
            &b[s * n..e * n],
            (n as isize, 1),
            &mut p,
        );
        p
    });
    let mut parts = partials.into_iter();
    match parts.next() {
        Some(first) => c.copy_from_slice(&first),
        None => c.fill(0.0),
    }
    for p in parts {
        for (ci, pi) in c.iter_mut().zip(&p) {
            *ci += pi;
        }
    }
}
