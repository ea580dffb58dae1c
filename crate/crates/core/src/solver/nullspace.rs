//! Nullspace parametrization `{z : Az = b} = {Fw + z0}`.

use nalgebra::{DMatrix, DVector, SVD};

use crate::error::{IpoError, Result};

#[derive(Debug, Clone)]
pub struct NullspaceReduction {
    /// Orthonormal basis of Null(A), d_z × d_n.
    pub f: DMatrix<f64>,
    /// Minimum-norm solution of `Az = b`.
    pub z0: DVector<f64>,
}

impl NullspaceReduction {
    pub fn nullity(&self) -> usize {
        self.f.ncols()
    }

    /// Reduction for the empty constraint system: F = I, z0 = 0.
    pub fn trivial(d_z: usize) -> Self {
        NullspaceReduction { f: DMatrix::identity(d_z, d_z), z0: DVector::zeros(d_z) }
    }
}

pub fn nullspace_reduce(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<NullspaceReduction> {
    let (d_eq, d_z) = a.shape();
    if b.len() != d_eq {
        return Err(IpoError::dim(format!("A has {d_eq} rows but b has length {}", b.len())));
    }
    if d_z == 0 {
        return Err(IpoError::DegenerateRegion("no decision variables".into()));
    }
    if d_eq == 0 {
        return Ok(NullspaceReduction::trivial(d_z));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(IpoError::InvalidConfig("non-finite constraint data".into()));
    }
    // Pad to at least d_z rows so the SVD returns a full set of right singular vectors.
    let rows = d_eq.max(d_z);
    let mut padded = DMatrix::zeros(rows, d_z);
    padded.rows_mut(0, d_eq).copy_from(a);
    let mut b_pad = DVector::zeros(rows);
    b_pad.rows_mut(0, d_eq).copy_from(b);

    let svd = SVD::new(padded.clone(), true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let sigma = &svd.singular_values;
    let smax = sigma.amax();
    let tol = rows.max(d_z) as f64 * f64::EPSILON * smax;

    let null_idx: Vec<usize> = (0..sigma.len()).filter(|&i| sigma[i] <= tol).collect();
    if null_idx.is_empty() {
        return Err(IpoError::DegenerateRegion(format!(
            "equality system has trivial nullspace (rank {d_z} = d_z)"
        )));
    }
    let mut f = DMatrix::zeros(d_z, null_idx.len());
    for (c, &i) in null_idx.iter().enumerate() {
        f.set_column(c, &v_t.row(i).transpose());
    }

    let mut z0 = DVector::zeros(d_z);
    for i in 0..sigma.len() {
        if sigma[i] > tol {
            let coef = u.column(i).dot(&b_pad) / sigma[i];
            z0 += v_t.row(i).transpose() * coef;
        }
    }
    let resid = (a * &z0 - b).norm();
    if resid > 1e-10 * b.norm().max(1.0) {
        return Err(IpoError::Infeasible(format!(
            "equality system Az = b is inconsistent (least-squares residual {resid:.3e})"
        )));
    }
    Ok(NullspaceReduction { f, z0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_asset_budget() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let red = nullspace_reduce(&a, &DVector::from_element(1, 1.0)).unwrap();
        assert_relative_eq!(red.z0, DVector::from_vec(vec![0.5, 0.5]), epsilon = 1e-14);
        let f = red.f.column(0);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((f[0] - s).abs() < 1e-14 && (f[1] + s).abs() < 1e-14 || (f[0] + s).abs() < 1e-14 && (f[1] - s).abs() < 1e-14);
        let red0 = nullspace_reduce(&a, &DVector::from_element(1, 0.0)).unwrap();
        assert!(red0.z0.amax() < 1e-15);
    }

    #[test]
    fn random_fat_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let d_z = rng.random_range(2..12);
            let d_eq = rng.random_range(1..d_z);
            let a = DMatrix::from_fn(d_eq, d_z, |_, _| rng.random_range(-1.0..1.0));
            let b = DVector::from_fn(d_eq, |_, _| rng.random_range(-1.0..1.0));
            let red = nullspace_reduce(&a, &b).unwrap();
            assert_eq!(red.nullity(), d_z - d_eq);
            assert!((&a * &red.f).norm() <= 1e-10);
            assert!((&a * &red.z0 - &b).norm() <= 1e-10);
            let ftf = red.f.transpose() * &red.f;
            assert!((ftf - DMatrix::identity(d_z - d_eq, d_z - d_eq)).amax() <= 1e-10);
        }
    }

    #[test]
    fn rank_deficient_rows_are_accepted_when_consistent() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let red = nullspace_reduce(&a, &DVector::from_vec(vec![1.0, 2.0])).unwrap();
        assert_eq!(red.nullity(), 2);
        assert!(matches!(
            nullspace_reduce(&a, &DVector::from_vec(vec![1.0, 3.0])),
            Err(IpoError::Infeasible(_))
        ));
    }
}
