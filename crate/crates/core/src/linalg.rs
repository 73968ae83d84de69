//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub(crate) fn all_finite_matrix(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub(crate) fn all_finite_vector(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Extreme singular values `(smallest, largest)`; `(0, 0)` for an empty matrix.
pub fn singular_value_range(m: &DMatrix<f64>) -> (f64, f64) {
    if m.is_empty() {
        return (0.0, 0.0);
    }
    let sv = m.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    (min, max)
}

/// Numerical invertibility: a full-pivot LU must find no exactly-zero pivot
/// and the smallest singular value must exceed `rank_tol` times the largest.
pub fn is_invertible(m: &DMatrix<f64>, rank_tol: f64) -> bool {
    if !m.is_square() || m.is_empty() {
        return false;
    }
    if !m.clone().full_piv_lu().is_invertible() {
        return false;
    }
    let (min, max) = singular_value_range(m);
    min > rank_tol * max
}

/// Inverse of a symmetric positive-definite matrix, or `None` if Cholesky fails.
pub(crate) fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Some(DMatrix::zeros(0, 0));
    }
    m.clone().cholesky().map(|c| c.inverse())
}

/// Moore-Penrose pseudo-inverse of a symmetric matrix via eigen-decomposition,
/// discarding eigenvalues below `rel_tol` times the largest magnitude.
pub(crate) fn symmetric_pinv(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let mut out = DMatrix::zeros(n, n);
    if scale == 0.0 {
        return out;
    }
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda.abs() > rel_tol * scale {
            let v = eig.eigenvectors.column(i);
            out += (v * v.transpose()) / lambda;
        }
    }
    out
}

/// Smallest eigenvalue of a symmetric matrix.
pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Column-major vectorisation.
pub(crate) fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidInput(format!("{what}: ragged rows")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub(crate) fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().cloned().collect())
        .collect()
}
