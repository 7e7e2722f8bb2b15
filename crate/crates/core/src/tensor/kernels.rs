//! Serial matrix-multiply kernels. All accumulate into `c`.
//!
//! `gemm_nn` walks `c` in 4×16 tiles whose accumulators stay in registers;
//! each entry is summed over `p = 0..k` in order and then added to `c`, so
//! results are bitwise reproducible. The transposed variants materialise the
//! transpose and reuse it.

use alloc::vec;

use super::Real;

const MR: usize = 4;
const NR: usize = 16;

#[inline(always)]
fn tile<T: Real>(k: usize, a: &[T], lda: usize, panel: &[T], c: &mut [T], ldc: usize) {
    let mut acc = [[T::zero(); NR]; MR];
    for (p, brow) in panel.chunks_exact(NR).enumerate().take(k) {
        let brow: &[T; NR] = brow.try_into().expect("panel width");
        for (r, acc_r) in acc.iter_mut().enumerate() {
            let av = a[r * lda + p];
            for (x, &bv) in acc_r.iter_mut().zip(brow) {
                *x += av * bv;
            }
        }
    }
    for (r, acc_r) in acc.iter().enumerate() {
        for (cv, &x) in c[r * ldc..r * ldc + NR].iter_mut().zip(acc_r) {
            *cv += x;
        }
    }
}

/// `c[i, j0..j0 + w] += Σ_p a[i, p] b[p, j0..j0 + w]` for each row in `rows`.
#[allow(clippy::too_many_arguments)]
fn edge<T: Real>(rows: core::ops::Range<usize>, j0: usize, w: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let mut acc = vec![T::zero(); w];
    for i in rows {
        acc.fill(T::zero());
        for p in 0..k {
            let av = a[i * k + p];
            for (x, &bv) in acc.iter_mut().zip(&b[p * n + j0..p * n + j0 + w]) {
                *x += av * bv;
            }
        }
        for (cv, &x) in c[i * n + j0..i * n + j0 + w].iter_mut().zip(&acc) {
            *cv += x;
        }
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`.
pub fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 || m == 0 {
        return;
    }
    let (m_full, n_full) = (m - m % MR, n - n % NR);
    let mut panel = vec![T::zero(); k * NR];
    for j in (0..n_full).step_by(NR) {
        for (p, dst) in panel.chunks_exact_mut(NR).enumerate() {
            dst.copy_from_slice(&b[p * n + j..p * n + j + NR]);
        }
        for i in (0..m_full).step_by(MR) {
            tile(k, &a[i * k..], k, &panel, &mut c[i * n + j..], n);
        }
        edge(m_full..m, j, NR, k, n, a, b, c);
    }
    if n_full < n {
        edge(0..m, n_full, n - n_full, k, n, a, b, c);
    }
}

fn transpose<T: Real>(rows: usize, cols: usize, x: &[T]) -> alloc::vec::Vec<T> {
    let mut t = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = x[i * cols + j];
        }
    }
    t
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`.
pub fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(b.len(), n * k);
    gemm_nn(m, k, n, a, &transpose(n, k, b), c);
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`.
pub fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    gemm_nn(k, m, n, &transpose(m, k, a), b, c);
}
