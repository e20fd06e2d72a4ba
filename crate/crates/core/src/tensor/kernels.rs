//! Row-major dense kernels. Matrix products go through a blocked GEMM; every
//! output element is reduced in the same order whatever the row count, so a
//! row's result does not depend on what else is in the batch.

use super::Float;

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<T: Float>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && b.len() == k * n && c.len() == m * n);
    T::gemm_strided(m, k, n, a, [k as isize, 1], b, [n as isize, 1], c, [n as isize, 1]);
}

/// `c[k×n] += aᵀ · b` with `a[m×k]`, `b[m×n]`.
pub fn gemm_tn<T: Float>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    assert!(a.len() == m * k && b.len() == m * n && c.len() == k * n);
    T::gemm_strided(k, m, n, a, [1, k as isize], b, [n as isize, 1], c, [n as isize, 1]);
}

/// `c[m×k] += a · bᵀ` with `a[m×n]`, `b[k×n]`.
pub fn gemm_nt<T: Float>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    assert!(a.len() == m * n && b.len() == k * n && c.len() == m * k);
    T::gemm_strided(m, n, k, a, [n as isize, 1], b, [1, n as isize], c, [k as isize, 1]);
}

#[cfg(test)]
fn transpose<T: Float>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_row<T: Float>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn products_agree_with_naive_triple_loop() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut c, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // aᵀ·(a·b) via gemm_tn against the explicit transpose.
        let mut lhs = vec![0.0; k * n];
        gemm_tn(&a, &c, &mut lhs, m, k, n);
        let at = transpose(&a, m, k);
        let mut rhs = vec![0.0; k * n];
        gemm_nn(&at, &c, &mut rhs, k, m, n);
        assert_eq!(lhs, rhs);
        // c·bᵀ via gemm_nt.
        let mut nt = vec![0.0; m * k];
        gemm_nt(&c, &b, &mut nt, m, n, k);
        for i in 0..m {
            for p in 0..k {
                let want: f64 = (0..n).map(|j| c[i * n + j] * b[p * n + j]).sum();
                assert!((nt[i * k + p] - want).abs() < 1e-12);
            }
        }
    }
}
