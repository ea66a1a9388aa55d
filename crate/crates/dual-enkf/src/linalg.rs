//! Small dense linear-algebra helpers shared across the crate.
//!
//! Everything here operates on `nalgebra` dynamic matrices of `f64`. Symmetric
//! matrices are re-symmetrized after products to control round-off drift.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Replace `m` by `(m + mᵀ)/2` in place.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    debug_assert_eq!(m.nrows(), m.ncols());
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Return `(m + mᵀ)/2`.
pub fn symmetrized(mut m: DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&mut m);
    m
}

/// Attempt a Cholesky factorization of the symmetric part of `m`.
pub fn try_cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    m.clone().cholesky()
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
///
/// Returns `None` when the factorization fails (matrix not SPD to working
/// precision). The result is symmetrized.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    try_cholesky(m).map(|c| symmetrized(c.inverse()))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrized(m.clone())
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Whether the symmetric part of `m` admits a Cholesky factorization.
pub fn is_spd(m: &DMatrix<f64>) -> bool {
    try_cholesky(m).is_some()
}

/// Mean of the columns of `m`, accumulated by fixed-order pairwise summation.
///
/// The reduction order depends only on the number of columns, never on the
/// execution schedule, so results are reproducible for any worker count.
pub fn column_mean(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.ncols();
    assert!(n > 0, "column_mean of an empty matrix");
    pairwise_col_sum(m, 0, n) / (n as f64)
}

fn pairwise_col_sum(m: &DMatrix<f64>, lo: usize, hi: usize) -> DVector<f64> {
    const LEAF: usize = 64;
    if hi - lo <= LEAF {
        let mut acc = DVector::zeros(m.nrows());
        for j in lo..hi {
            acc += m.column(j);
        }
        acc
    } else {
        let mid = lo + (hi - lo) / 2;
        pairwise_col_sum(m, lo, mid) + pairwise_col_sum(m, mid, hi)
    }
}

/// Frobenius norm.
pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.norm()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetrize_averages_off_diagonal() {
        let mut m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 4.0, 3.0]);
        symmetrize(&mut m);
        assert_eq!(m[(0, 1)], 3.0);
        assert_eq!(m[(1, 0)], 3.0);
    }

    #[test]
    fn spd_inverse_round_trip() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let inv = spd_inverse(&m).unwrap();
        let id = &m * &inv;
        assert!((id - DMatrix::<f64>::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn spd_inverse_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(spd_inverse(&m).is_none());
    }

    #[test]
    fn column_mean_matches_naive() {
        let m = DMatrix::from_fn(3, 1000, |i, j| (i as f64) + 0.01 * (j as f64));
        let mean = column_mean(&m);
        for i in 0..3 {
            let naive: f64 = (0..1000).map(|j| m[(i, j)]).sum::<f64>() / 1000.0;
            assert!((mean[i] - naive).abs() < 1e-12);
        }
    }
}
