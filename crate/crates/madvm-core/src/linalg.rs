//! Tiny dense solver, enough for oracle-scale systems.

use alloc::vec::Vec;

/// Solves `A x = b` in place by Gaussian elimination with partial
/// pivoting. `a` is n×n row-major and is destroyed. Returns `None` when a
/// pivot falls below `pivot_tol` (singular to working precision).
pub(crate) fn solve_dense(
    a: &mut [f64],
    b: &mut [f64],
    n: usize,
    pivot_tol: f64,
) -> Option<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n);
    for k in 0..n {
        let mut piv = k;
        let mut best = libm::fabs(a[k * n + k]);
        for i in k + 1..n {
            let v = libm::fabs(a[i * n + k]);
            if v > best {
                best = v;
                piv = i;
            }
        }
        if best < pivot_tol {
            return None;
        }
        if piv != k {
            for j in k..n {
                a.swap(k * n + j, piv * n + j);
            }
            b.swap(k, piv);
        }
        let pivot = a[k * n + k];
        for i in k + 1..n {
            let factor = a[i * n + k] / pivot;
            if factor == 0.0 {
                continue;
            }
            for j in k..n {
                a[i * n + j] -= factor * a[k * n + j];
            }
            b[i] -= factor * b[k];
        }
    }
    let mut x = alloc::vec![0.0; n];
    for k in (0..n).rev() {
        let mut acc = b[k];
        for j in k + 1..n {
            acc -= a[k * n + j] * x[j];
        }
        x[k] = acc / a[k * n + k];
    }
    Some(x)
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}
