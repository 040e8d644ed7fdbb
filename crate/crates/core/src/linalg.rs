//! Dense helpers on top of nalgebra: jittered Cholesky, triangular solves and
//! log-determinants. Scale matrices are never inverted explicitly.

use nalgebra::{DMatrix, DVector};

use crate::error::{QepError, Result};

/// Relative jitter used for the single retry after a failed factorization.
pub const RETRY_JITTER: f64 = 1e-6;

/// Lower Cholesky factor of a symmetric positive definite matrix.
///
/// On failure the factorization is retried once with `1e-6 * mean(diag)` added
/// to the diagonal.
pub fn cholesky(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != a.ncols() {
        return Err(QepError::InvalidArgument(format!(
            "cholesky of non-square {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(QepError::NumericalFailure("non-finite matrix entry".into()));
    }
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.l());
    }
    let n = a.nrows();
    let mean_diag = a.diagonal().mean().abs().max(f64::MIN_POSITIVE);
    let mut b = a.clone();
    for i in 0..n {
        b[(i, i)] += RETRY_JITTER * mean_diag;
    }
    b.cholesky()
        .map(|ch| ch.l())
        .ok_or_else(|| QepError::NumericalFailure(format!("{n}x{n} matrix is not positive definite")))
}

/// Solves `L X = B` for lower-triangular `L`.
pub fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.solve_lower_triangular(b).expect("triangular factor with zero diagonal")
}

/// Solves `Lᵀ X = B` for lower-triangular `L`.
pub fn solve_lower_t(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.tr_solve_lower_triangular(b).expect("triangular factor with zero diagonal")
}

/// `(L Lᵀ)⁻¹ B`.
pub fn chol_solve(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    solve_lower_t(l, &solve_lower(l, b))
}

pub fn chol_solve_vec(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let y = l.solve_lower_triangular(b).expect("triangular factor with zero diagonal");
    l.tr_solve_lower_triangular(&y).expect("triangular factor with zero diagonal")
}

/// `log |L Lᵀ|`.
pub fn chol_logdet(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Symmetric part `(A + Aᵀ)/2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    symmetrize(a)
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Lower-triangular part (strict upper triangle zeroed).
pub fn tril(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = a.clone();
    for j in 0..a.ncols() {
        for i in 0..j.min(a.nrows()) {
            out[(i, j)] = 0.0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_roundtrip_and_logdet() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 2.0, 0.4, 2.0, 3.0, 0.5, 0.4, 0.5, 2.0]);
        let l = cholesky(&a).unwrap();
        assert!((&l * l.transpose() - &a).norm() < 1e-12);
        let det = a.clone().determinant();
        assert!((chol_logdet(&l) - det.ln()).abs() < 1e-12);
        let b = DMatrix::from_row_slice(3, 1, &[1.0, -1.0, 2.0]);
        let x = chol_solve(&l, &b);
        assert!((&a * x - b).norm() < 1e-12);
    }

    #[test]
    fn singular_matrix_gets_one_jitter_retry() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = cholesky(&a).unwrap();
        assert!(l[(1, 1)] > 0.0);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(cholesky(&bad), Err(QepError::NumericalFailure(_))));
    }
}
