//! Backward pass through the MVO program by implicit differentiation of its
//! KKT conditions.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};

use crate::error::{IpoError, Result};
use crate::linalg::check_len;
use crate::model::{DesignMask, FeasibleRegion, RegionKind};
use crate::solver::QpSolution;

#[derive(Debug, Clone)]
pub struct QpGradients {
    pub d_cost_d_yhat: DVector<f64>,
    pub d_cost_d_vhat: DMatrix<f64>,
    pub d_cost_d_a: Option<DMatrix<f64>>,
    pub d_cost_d_b: Option<DVector<f64>>,
    pub d_cost_d_g: Option<DMatrix<f64>>,
    pub d_cost_d_h: Option<DVector<f64>>,
    /// The KKT matrix needed a ridge because some constraint was weakly active.
    pub regularized: bool,
}

/// Gradients of a downstream cost `c(z*)` with respect to the program data,
/// given `∂c/∂z` at the solution.
pub fn backward(sol: &QpSolution, region: &FeasibleRegion, d_cost_d_z: &DVector<f64>) -> Result<QpGradients> {
    let n = sol.z.len();
    check_len(d_cost_d_z, n, "d_cost_d_z")?;
    if region.d_z() != n || region.h().len() != sol.lambda.len() || region.b().len() != sol.nu.len() {
        return Err(IpoError::dim("solution does not belong to this region"));
    }
    if d_cost_d_z.iter().any(|v| !v.is_finite()) {
        return Err(IpoError::dim("d_cost_d_z has non-finite entries"));
    }
    let mi = sol.lambda.len();
    let p = sol.nu.len();
    let lu = sol.kkt_lu().ok_or_else(|| IpoError::Differentiation {
        active: sol.active_set(),
        degenerate: sol.degenerate.clone(),
    })?;
    let omega = sol.omega();
    let mut rhs = DVector::zeros(n + mi + p);
    rhs.rows_mut(0, n).copy_from(&(-d_cost_d_z * omega));
    let u = lu.solve(&rhs).ok_or_else(|| IpoError::Differentiation {
        active: sol.active_set(),
        degenerate: sol.degenerate.clone(),
    })?;
    let dz = u.rows(0, n).into_owned();
    let dlam = u.rows(n, mi).into_owned();
    let dnu = u.rows(n + mi, p).into_owned() / omega;

    let delta = region.delta();
    let z = &sol.z;
    let d_yhat = -&dz;
    let mut d_v = &dz * z.transpose() + z * dz.transpose();
    d_v *= 0.5 * delta;

    let (d_a, d_b) = if p > 0 {
        (Some(&dnu * z.transpose() + &sol.nu * dz.transpose()), Some(-&dnu))
    } else {
        (None, None)
    };
    let (d_g, d_h) = if mi > 0 {
        let ldl = sol.lambda.component_mul(&dlam);
        (Some(&ldl * z.transpose() + &sol.lambda * dz.transpose()), Some(-ldl))
    } else {
        (None, None)
    };
    let grads = QpGradients {
        d_cost_d_yhat: d_yhat,
        d_cost_d_vhat: d_v,
        d_cost_d_a: d_a,
        d_cost_d_b: d_b,
        d_cost_d_g: d_g,
        d_cost_d_h: d_h,
        regularized: sol.needs_ridge(),
    };
    if grads.d_cost_d_yhat.iter().any(|v| !v.is_finite()) {
        return Err(IpoError::Differentiation { active: sol.active_set(), degenerate: sol.degenerate.clone() });
    }
    Ok(grads)
}

/// `∇θ = diag(x) Pᵀ ∂c/∂ŷ`.
pub fn chain_to_theta(d_cost_d_yhat: &DVector<f64>, x: &DVector<f64>, p: &DesignMask) -> Result<DVector<f64>> {
    check_len(d_cost_d_yhat, p.d_z(), "d_cost_d_yhat")?;
    check_len(x, p.d_x(), "features")?;
    Ok(p.transpose_apply(x, d_cost_d_yhat))
}

/// Action of the closed-form Jacobian `(∂z*/∂ŷ)ᵀ g` for the unconstrained and
/// equality cases.
pub fn closed_form_yhat_grad(region: &FeasibleRegion, v_hat: &DMatrix<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
    let delta = region.delta();
    match region.kind() {
        RegionKind::Unconstrained => {
            let ch = crate::linalg::cholesky(v_hat, "v_hat")?;
            Ok(ch.solve(g) / delta)
        }
        RegionKind::Equality => {
            let red = region.reduction().expect("equality region carries its reduction");
            let ch = crate::solver::reduced_factor(v_hat, red)?;
            Ok(&red.f * ch.solve(&red.f.tr_mul(g)) / delta)
        }
        RegionKind::Inequality => Err(IpoError::InvalidConfig("closed form needs a region without inequalities".into())),
    }
}

/// Factorization of the reduced KKT matrix `[[Q, G_Jᵀ, Aᵀ], [G_J, 0, 0], [A, 0, 0]]`
/// for a fixed active set `J`. It depends only on the set, so it is reused
/// across training iterations while the set is unchanged.
pub struct ActiveSetKkt {
    active: Vec<usize>,
    n: usize,
    omega: f64,
    factor: ActiveFactor,
    regularized: bool,
}

enum ActiveFactor {
    Chol(Cholesky<f64, Dyn>),
    Lu(LU<f64, Dyn, Dyn>),
}

impl ActiveSetKkt {
    pub fn new(q: &DMatrix<f64>, a: &DMatrix<f64>, g: &DMatrix<f64>, active: Vec<usize>) -> Result<Self> {
        let n = q.nrows();
        let scale = crate::linalg::max_abs(q);
        let omega = if scale > 0.0 { 1.0 / scale } else { 1.0 };
        let na = active.len();
        let p = a.nrows();
        let factor = if na + p == 0 {
            ActiveFactor::Chol(
                Cholesky::new(q * omega).ok_or_else(|| IpoError::NotPositiveDefinite("QP Hessian".into()))?,
            )
        } else {
            let dim = n + na + p;
            let mut m = DMatrix::zeros(dim, dim);
            m.view_mut((0, 0), (n, n)).copy_from(&(q * omega));
            for (r, &j) in active.iter().enumerate() {
                for k in 0..n {
                    m[(k, n + r)] = g[(j, k)];
                    m[(n + r, k)] = g[(j, k)];
                }
            }
            for r in 0..p {
                for k in 0..n {
                    m[(k, n + na + r)] = a[(r, k)];
                    m[(n + na + r, k)] = a[(r, k)];
                }
            }
            // Dependent constraint rows (more active rows than the nullspace can
            // absorb) make the system singular; a small negative diagonal in the
            // multiplier block keeps it quasi-definite.
            let mut regularized = na + p > n;
            let mut lu = LU::new(m.clone());
            if !regularized && reciprocal_condition(&lu) < 1e-13 {
                regularized = true;
            }
            if regularized {
                for i in n..dim {
                    m[(i, i)] = -1e-10;
                }
                lu = LU::new(m);
                if !lu.is_invertible() {
                    return Err(IpoError::Differentiation { active, degenerate: vec![] });
                }
            }
            return Ok(ActiveSetKkt { active, n, omega, factor: ActiveFactor::Lu(lu), regularized });
        };
        Ok(ActiveSetKkt { active, n, omega, factor, regularized: false })
    }

    pub fn regularized(&self) -> bool {
        self.regularized
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    /// Solves the QP `min ½zᵀQz + cᵀz, Az = b, Gz ≤ h` under the assumption
    /// that the cached active set is optimal. Returns `z` when the result
    /// satisfies the KKT conditions (non-negative multipliers, inactive rows
    /// feasible), which makes it the exact optimum; `None` otherwise.
    pub fn warm_solve(&self, c: &DVector<f64>, b: &DVector<f64>, g: &DMatrix<f64>, h: &DVector<f64>) -> Option<DVector<f64>> {
        if self.regularized {
            return None;
        }
        let n = self.n;
        let z = match &self.factor {
            ActiveFactor::Chol(ch) => ch.solve(&(-c * self.omega)),
            ActiveFactor::Lu(lu) => {
                let na = self.active.len();
                let mut rhs = DVector::zeros(lu.l().nrows());
                rhs.rows_mut(0, n).copy_from(&(-c * self.omega));
                for (r, &j) in self.active.iter().enumerate() {
                    rhs[n + r] = h[j];
                }
                rhs.rows_mut(n + na, b.len()).copy_from(b);
                let sol = lu.solve(&rhs)?;
                // normalized multipliers of the active rows
                if sol.rows(n, na).iter().any(|l| !(*l >= 0.0)) {
                    return None;
                }
                sol.rows(0, n).into_owned()
            }
        };
        let gz = g * &z;
        let feasible = gz.iter().zip(h.iter()).all(|(l, r)| *l <= r + 1e-10 * (1.0 + r.abs()));
        (feasible && z.iter().all(|v| v.is_finite())).then_some(z)
    }

    /// `∂c/∂ŷ` for the given `∂c/∂z`.
    pub fn yhat_grad(&self, d_cost_d_z: &DVector<f64>) -> DVector<f64> {
        let rhs = d_cost_d_z * self.omega;
        match &self.factor {
            ActiveFactor::Chol(ch) => ch.solve(&rhs),
            ActiveFactor::Lu(lu) => {
                let mut full = DVector::zeros(lu.l().nrows());
                full.rows_mut(0, self.n).copy_from(&rhs);
                lu.solve(&full).expect("invertible by construction").rows(0, self.n).into_owned()
            }
        }
    }
}

/// Cheap conditioning proxy from the LU pivots.
fn reciprocal_condition(lu: &LU<f64, Dyn, Dyn>) -> f64 {
    let u = lu.u();
    let diag: Vec<f64> = (0..u.nrows().min(u.ncols())).map(|i| u[(i, i)].abs()).collect();
    let hi = diag.iter().cloned().fold(0.0, f64::max);
    let lo = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if hi > 0.0 { lo / hi } else { 0.0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::mvo_cost;
    use crate::solver::{solve_inequality, IpmConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toeplitz(n: usize, sigma: f64, rho: f64) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |j, k| sigma * sigma * rho.powi((j as i32 - k as i32).abs()))
    }

    fn cost_at(y_hat: &DVector<f64>, v_hat: &DMatrix<f64>, region: &FeasibleRegion, y: &DVector<f64>, v: &DMatrix<f64>) -> f64 {
        let z = solve_inequality(y_hat, v_hat, region, &IpmConfig::default()).unwrap().z;
        mvo_cost(&z, y, v, region.delta()).unwrap()
    }

    #[test]
    fn warm_solve_reproduces_ipm() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let cfg = IpmConfig::default();
        let mut reused = 0;
        for k in 0..30 {
            let n = 6;
            let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let vh = &l * l.transpose() + DMatrix::identity(n, n) * 0.2;
            let budget = if k % 2 == 0 { Some(0.5) } else { None };
            let region = FeasibleRegion::boxed(n, 0.3, budget, 1.5).unwrap();
            let y = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let sol = solve_inequality(&y, &vh, &region, &cfg).unwrap();
            let kkt = ActiveSetKkt::new(sol.q(), region.a(), region.g(), sol.active_set()).unwrap();
            let q = &vh * region.delta();
            if let Some(z) = kkt.warm_solve(&(-&y), region.b(), region.g(), region.h()) {
                reused += 1;
                assert!((&z - &sol.z).amax() <= 1e-9);
            }
            // a perturbed ŷ with the same active set is solved exactly
            let y2 = &y + DVector::from_fn(n, |_, _| rng.random_range(-1e-4..1e-4));
            let s2 = solve_inequality(&y2, &vh, &region, &cfg).unwrap();
            if let Some(z) = kkt.warm_solve(&(-&y2), region.b(), region.g(), region.h()) {
                assert!((&z - &s2.z).amax() <= 1e-9, "{k}");
            }
            // a wrong active set is rejected or still optimal
            let wrong = ActiveSetKkt::new(&q, region.a(), region.g(), vec![]).unwrap();
            if let Some(z) = wrong.warm_solve(&(-&y), region.b(), region.g(), region.h()) {
                assert!((&z - &sol.z).amax() <= 1e-9);
            }
        }
        assert!(reused >= 25, "{reused}");
    }

    #[test]
    fn loose_box_reduces_to_identity_block() {
        let region = FeasibleRegion::boxed(3, 100.0, None, 1.0).unwrap();
        let y_hat = DVector::from_vec(vec![0.1, -0.2, 0.3]);
        let sol = solve_inequality(&y_hat, &DMatrix::identity(3, 3), &region, &IpmConfig::default()).unwrap();
        let g = DVector::from_vec(vec![0.5, 1.0, -2.0]);
        let grads = backward(&sol, &region, &g).unwrap();
        assert!((&grads.d_cost_d_yhat - &g).amax() <= 1e-10);
        assert!(!grads.regularized);
    }

    #[test]
    fn pinned_coordinate_has_zero_sensitivity() {
        let region = FeasibleRegion::boxed(2, 0.5, None, 1.0).unwrap();
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.0]);
        let y_hat = DVector::from_vec(vec![2.0, 0.1]);
        let sol = solve_inequality(&y_hat, &v, &region, &IpmConfig::default()).unwrap();
        assert!(sol.lambda[0] > 0.1);
        let y = DVector::from_vec(vec![0.3, -0.4]);
        let g = -&y + &v * &sol.z;
        let grads = backward(&sol, &region, &g).unwrap();
        let eps = 1e-5;
        for j in 0..2 {
            let mut up = y_hat.clone();
            up[j] += eps;
            let mut dn = y_hat.clone();
            dn[j] -= eps;
            let fd = (cost_at(&up, &v, &region, &y, &v) - cost_at(&dn, &v, &region, &y, &v)) / (2.0 * eps);
            assert!((fd - grads.d_cost_d_yhat[j]).abs() <= 1e-7, "j={j} fd={fd} an={}", grads.d_cost_d_yhat[j]);
        }
        assert!(grads.d_cost_d_yhat[0].abs() <= 1e-9);
    }

    /// Every parameter gradient against central differences of the full solve.
    #[test]
    fn all_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 6;
        let mut checked = 0;
        while checked < 10 {
            let vt = toeplitz(n, 1.0, 0.3);
            let v_hat = &vt + DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| rng.random_range(0.0..0.3)));
            let region = FeasibleRegion::boxed(n, 0.4, Some(0.2), 2.0).unwrap();
            let y_hat = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let y = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let sol = solve_inequality(&y_hat, &v_hat, &region, &IpmConfig::default()).unwrap();
            if !sol.degenerate.is_empty() {
                continue;
            }
            let near_kink = (0..sol.lambda.len()).any(|j| sol.lambda[j] < 1e-4 && sol.slack[j] < 1e-4);
            if near_kink {
                continue;
            }
            checked += 1;
            let delta = region.delta();
            let g = -&y + &vt * &sol.z * delta;
            let grads = backward(&sol, &region, &g).unwrap();
            let c = |yh: &DVector<f64>, vh: &DMatrix<f64>, r: &FeasibleRegion| {
                let z = solve_inequality(yh, vh, r, &IpmConfig::default()).unwrap().z;
                mvo_cost(&z, &y, &vt, delta).unwrap()
            };
            let eps = 1e-6;
            let close = |an: f64, fd: f64, what: &str| {
                assert!((an - fd).abs() <= 1e-4 * fd.abs().max(1e-3), "{what}: analytic {an} vs fd {fd}");
            };
            for j in 0..n {
                let mut up = y_hat.clone();
                up[j] += eps;
                let mut dn = y_hat.clone();
                dn[j] -= eps;
                close(grads.d_cost_d_yhat[j], (c(&up, &v_hat, &region) - c(&dn, &v_hat, &region)) / (2.0 * eps), "yhat");
            }
            // symmetric perturbation E_jk + E_kj: directional derivative 2·G_jk off-diagonal
            for (j, k) in [(0, 0), (1, 3), (2, 5)] {
                let mut e = DMatrix::zeros(n, n);
                e[(j, k)] += 1.0;
                e[(k, j)] += if j == k { 0.0 } else { 1.0 };
                let fd = (c(&y_hat, &(&v_hat + &e * eps), &region) - c(&y_hat, &(&v_hat - &e * eps), &region)) / (2.0 * eps);
                let an = grads.d_cost_d_vhat.component_mul(&e).sum();
                close(an, fd, "vhat");
            }
            let ga = grads.d_cost_d_a.as_ref().unwrap();
            let gb = grads.d_cost_d_b.as_ref().unwrap();
            let gg = grads.d_cost_d_g.as_ref().unwrap();
            let gh = grads.d_cost_d_h.as_ref().unwrap();
            let mk = |a: DMatrix<f64>, b: DVector<f64>, gm: DMatrix<f64>, h: DVector<f64>| {
                FeasibleRegion::inequality(a, b, gm, h, delta).unwrap()
            };
            for k in [0, 3] {
                let mut au = region.a().clone();
                au[(0, k)] += eps;
                let mut ad = region.a().clone();
                ad[(0, k)] -= eps;
                let fd = (c(&y_hat, &v_hat, &mk(au, region.b().clone(), region.g().clone(), region.h().clone()))
                    - c(&y_hat, &v_hat, &mk(ad, region.b().clone(), region.g().clone(), region.h().clone())))
                    / (2.0 * eps);
                close(ga[(0, k)], fd, "A");
            }
            let fd = (c(&y_hat, &v_hat, &mk(region.a().clone(), region.b().add_scalar(eps), region.g().clone(), region.h().clone()))
                - c(&y_hat, &v_hat, &mk(region.a().clone(), region.b().add_scalar(-eps), region.g().clone(), region.h().clone())))
                / (2.0 * eps);
            close(gb[0], fd, "b");
            for r in 0..2 * n {
                let mut hu = region.h().clone();
                hu[r] += eps;
                let mut hd = region.h().clone();
                hd[r] -= eps;
                let fd = (c(&y_hat, &v_hat, &mk(region.a().clone(), region.b().clone(), region.g().clone(), hu))
                    - c(&y_hat, &v_hat, &mk(region.a().clone(), region.b().clone(), region.g().clone(), hd)))
                    / (2.0 * eps);
                close(gh[r], fd, "h");
                let k = r % n;
                let mut gu = region.g().clone();
                gu[(r, k)] += eps;
                let mut gd = region.g().clone();
                gd[(r, k)] -= eps;
                let fd = (c(&y_hat, &v_hat, &mk(region.a().clone(), region.b().clone(), gu, region.h().clone()))
                    - c(&y_hat, &v_hat, &mk(region.a().clone(), region.b().clone(), gd, region.h().clone())))
                    / (2.0 * eps);
                close(gg[(r, k)], fd, "G");
            }
            assert_eq!(grads.d_cost_d_vhat, grads.d_cost_d_vhat.transpose());
        }
    }

    #[test]
    fn inactive_constraints_match_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for with_budget in [false, true] {
            let n = 5;
            let v_hat = toeplitz(n, 1.0, 0.4);
            let region = FeasibleRegion::boxed(n, 50.0, with_budget.then_some(1.0), 1.5).unwrap();
            let y_hat = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let sol = solve_inequality(&y_hat, &v_hat, &region, &IpmConfig::default()).unwrap();
            let g = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let grads = backward(&sol, &region, &g).unwrap();
            let want = closed_form_yhat_grad(&region.without_inequalities(), &v_hat, &g).unwrap();
            assert!((grads.d_cost_d_yhat - &want).amax() <= 1e-8);
            let kkt = ActiveSetKkt::new(sol.q(), region.a(), region.g(), sol.active_set()).unwrap();
            assert!((kkt.yhat_grad(&g) - want).amax() <= 1e-8);
        }
    }

    #[test]
    fn reduced_system_matches_full_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let n = 8;
        let v_hat = toeplitz(n, 0.0125, 0.5);
        let region = FeasibleRegion::boxed(n, 0.5, Some(0.0), 1.0).unwrap();
        for _ in 0..10 {
            let y_hat = DVector::from_fn(n, |_, _| rng.random_range(-2e-4..2e-4));
            let sol = solve_inequality(&y_hat, &v_hat, &region, &IpmConfig::default()).unwrap();
            let g = DVector::from_fn(n, |_, _| rng.random_range(-0.01..0.01));
            let full = backward(&sol, &region, &g).unwrap().d_cost_d_yhat;
            let kkt = ActiveSetKkt::new(sol.q(), region.a(), region.g(), sol.active_set()).unwrap();
            let red = kkt.yhat_grad(&g);
            assert!((&full - &red).amax() <= 1e-8 * full.amax().max(1.0), "{full} vs {red}");
        }
    }

    #[test]
    fn chain_rule_examples() {
        let p = DesignMask::identity(3);
        let g = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        assert_eq!(chain_to_theta(&g, &DVector::zeros(3), &p).unwrap(), DVector::zeros(3));
        assert_eq!(chain_to_theta(&g, &DVector::from_element(3, 1.0), &p).unwrap(), g);
    }
}
