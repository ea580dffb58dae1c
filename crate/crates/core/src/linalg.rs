//! Small dense helpers shared by the solvers and estimators.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{IpoError, Result};

/// Largest absolute entry; zero for empty matrices.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn max_abs_vec(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Symmetry check relative to the matrix scale.
pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = max_abs(m).max(1.0);
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > tol * scale {
                return false;
            }
        }
    }
    true
}

/// Replace `m` by `(m + mᵀ)/2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn cholesky(m: &DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    if !m.is_square() {
        return Err(IpoError::dim(format!(
            "{context}: expected square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Cholesky::new(m.clone()).ok_or_else(|| IpoError::NotPositiveDefinite(context.to_string()))
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.total_cmp(b));
    vals
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(0.0)
}

/// Spectral condition number of a symmetric PSD matrix (infinite when singular).
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let vals = sym_eigenvalues(m);
    match (vals.first(), vals.last()) {
        (Some(&lo), Some(&hi)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

/// `xᵀ M x`.
pub fn quad_form(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(m * x))
}

pub(crate) fn check_len(v: &DVector<f64>, n: usize, what: &str) -> Result<()> {
    if v.len() != n {
        return Err(IpoError::dim(format!("{what}: expected length {n}, got {}", v.len())));
    }
    Ok(())
}

pub(crate) fn check_square(m: &DMatrix<f64>, n: usize, what: &str) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return Err(IpoError::dim(format!(
            "{what}: expected {n}x{n}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn condition_number_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0, 2.0]));
        assert!((condition_number(&m) - 4.0).abs() < 1e-12);
        assert!(condition_number(&DMatrix::zeros(2, 2)).is_infinite());
    }

    #[test]
    fn symmetrize_makes_exactly_symmetric() {
        let mut m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0 + 1e-9, 3.0]);
        assert!(!is_symmetric(&m, 1e-12));
        symmetrize(&mut m);
        assert_eq!(m[(0, 1)], m[(1, 0)]);
    }
}
