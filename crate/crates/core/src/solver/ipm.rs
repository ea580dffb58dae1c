//! Dense primal-dual interior-point method for
//!
//! ```text
//! minimize ½ zᵀQz + cᵀz   subject to  Az = b,  Gz ≤ h
//! ```
//!
//! Mehrotra predictor-corrector on the reduced Newton system, followed by an
//! active-set polish that solves the equality KKT system exactly.

use std::fmt;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, Dyn, LU};
use serde::{Deserialize, Serialize};

use crate::error::{IpoError, Result};
use crate::linalg::{max_abs, max_abs_vec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IpmConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub polish: bool,
}

impl Default for IpmConfig {
    fn default() -> Self {
        IpmConfig { tol: 1e-8, max_iter: 100, polish: true }
    }
}

/// Thresholds on normalized duals and slacks below which a constraint is
/// treated as weakly active.
pub const DEGENERACY_TOL: f64 = 1e-7;

pub struct QpSolution {
    pub z: DVector<f64>,
    /// Inequality duals.
    pub lambda: DVector<f64>,
    /// Equality duals.
    pub nu: DVector<f64>,
    /// `h − Gz`.
    pub slack: DVector<f64>,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub polished: bool,
    /// Constraints with both dual and slack near zero.
    pub degenerate: Vec<usize>,
    omega: f64,
    q: DMatrix<f64>,
    a: DMatrix<f64>,
    g: DMatrix<f64>,
    kkt: OnceLock<Option<LU<f64, Dyn, Dyn>>>,
}

impl fmt::Debug for QpSolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("QpSolution")
            .field("z", &self.z)
            .field("lambda", &self.lambda)
            .field("nu", &self.nu)
            .field("kkt_residual", &self.kkt_residual)
            .field("iterations", &self.iterations)
            .field("polished", &self.polished)
            .field("degenerate", &self.degenerate)
            .finish()
    }
}

impl QpSolution {
    /// Indices with a strictly positive dual.
    pub fn active_set(&self) -> Vec<usize> {
        (0..self.lambda.len())
            .filter(|&j| self.omega * self.lambda[j] > self.slack[j].max(0.0) && !self.degenerate.contains(&j))
            .collect()
    }

    /// Strongly active rows plus tight degenerate rows, as many as keep the
    /// KKT system square. Holding a weakly active row fixed picks one side of
    /// the kink, which is what a training step needs.
    pub fn tight_active_set(&self) -> Vec<usize> {
        let mut active = self.active_set();
        let room = self.z.len().saturating_sub(self.nu.len());
        let mut weak: Vec<usize> = self.degenerate.clone();
        weak.sort_by(|&a, &b| self.lambda[b].total_cmp(&self.lambda[a]));
        for j in weak {
            if active.len() >= room {
                break;
            }
            active.push(j);
        }
        active.sort_unstable();
        active
    }

    /// Weakly active constraints, or more tight rows than variables.
    pub fn needs_ridge(&self) -> bool {
        let tight = self.slack.iter().filter(|s| s.abs() < DEGENERACY_TOL).count();
        !self.degenerate.is_empty() || tight + self.nu.len() > self.z.len()
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub(crate) fn omega(&self) -> f64 {
        self.omega
    }

    /// Normalized backward matrix
    /// `[[ωQ, Gᵀdiag(ωλ), Aᵀ], [G, diag(Gz−h), 0], [A, 0, 0]]`, factorized once
    /// on first use. `None` when singular.
    pub(crate) fn kkt_lu(&self) -> Option<&LU<f64, Dyn, Dyn>> {
        self.kkt
            .get_or_init(|| {
                let n = self.z.len();
                let mi = self.lambda.len();
                let p = self.nu.len();
                let dim = n + mi + p;
                let mut m = DMatrix::zeros(dim, dim);
                m.view_mut((0, 0), (n, n)).copy_from(&(&self.q * self.omega));
                for j in 0..mi {
                    let lj = self.omega * self.lambda[j];
                    for k in 0..n {
                        m[(k, n + j)] = self.g[(j, k)] * lj;
                        m[(n + j, k)] = self.g[(j, k)];
                    }
                    m[(n + j, n + j)] = -self.slack[j];
                }
                for r in 0..p {
                    for k in 0..n {
                        m[(k, n + mi + r)] = self.a[(r, k)];
                        m[(n + mi + r, k)] = self.a[(r, k)];
                    }
                }
                if self.needs_ridge() {
                    let ridge = 1e-10 * max_abs(&m).max(1.0);
                    for i in 0..dim {
                        m[(i, i)] += ridge;
                    }
                }
                let lu = LU::new(m);
                lu.is_invertible().then_some(lu)
            })
            .as_ref()
    }
}

struct Scaled<'a> {
    q: DMatrix<f64>,
    c: DVector<f64>,
    a: &'a DMatrix<f64>,
    b: &'a DVector<f64>,
    g: &'a DMatrix<f64>,
    h: &'a DVector<f64>,
}

enum Newton {
    Chol(nalgebra::Cholesky<f64, Dyn>),
    Lu(LU<f64, Dyn, Dyn>),
}

impl Newton {
    fn factor(k: DMatrix<f64>, a: &DMatrix<f64>) -> Option<Newton> {
        let n = k.nrows();
        let p = a.nrows();
        if p == 0 {
            if let Some(ch) = nalgebra::Cholesky::new(k.clone()) {
                return Some(Newton::Chol(ch));
            }
            let lu = LU::new(k);
            return lu.is_invertible().then_some(Newton::Lu(lu));
        }
        let mut m = DMatrix::zeros(n + p, n + p);
        m.view_mut((0, 0), (n, n)).copy_from(&k);
        m.view_mut((0, n), (n, p)).copy_from(&a.transpose());
        m.view_mut((n, 0), (p, n)).copy_from(a);
        let lu = LU::new(m);
        lu.is_invertible().then_some(Newton::Lu(lu))
    }

    /// Solve `[K Aᵀ; A 0][dz; dν] = [r1; r2]`.
    fn solve(&self, r1: &DVector<f64>, r2: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        let n = r1.len();
        match self {
            Newton::Chol(ch) => Some((ch.solve(r1), DVector::zeros(0))),
            Newton::Lu(lu) => {
                let mut rhs = DVector::zeros(n + r2.len());
                rhs.rows_mut(0, n).copy_from(r1);
                rhs.rows_mut(n, r2.len()).copy_from(r2);
                let sol = lu.solve(&rhs)?;
                Some((sol.rows(0, n).into_owned(), sol.rows(n, r2.len()).into_owned()))
            }
        }
    }
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    let mut alpha = 1.0_f64;
    for (x, dx) in v.iter().zip(dv.iter()) {
        if *dx < 0.0 {
            alpha = alpha.min(-x / dx);
        }
    }
    alpha
}

/// Unscaled KKT residual (∞-norm over stationarity, feasibility, dual sign and
/// complementarity).
#[allow(clippy::too_many_arguments)]
pub fn kkt_residual(
    q: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    g: &DMatrix<f64>,
    h: &DVector<f64>,
    z: &DVector<f64>,
    lambda: &DVector<f64>,
    nu: &DVector<f64>,
) -> f64 {
    let stat = (q * z + c + a.transpose() * nu + g.transpose() * lambda).amax();
    let eq = if a.nrows() > 0 { (a * z - b).amax() } else { 0.0 };
    let gz_h = g * z - h;
    let mut r = stat.max(eq);
    for j in 0..h.len() {
        r = r.max(gz_h[j].max(0.0)).max((-lambda[j]).max(0.0)).max((lambda[j] * gz_h[j]).abs());
    }
    r
}

fn check_shapes(
    q: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    g: &DMatrix<f64>,
    h: &DVector<f64>,
) -> Result<()> {
    let n = c.len();
    if q.shape() != (n, n) || a.ncols() != n || g.ncols() != n || a.nrows() != b.len() || g.nrows() != h.len() {
        return Err(IpoError::dim(format!(
            "QP shapes: Q {:?}, c {}, A {:?}, b {}, G {:?}, h {}",
            q.shape(),
            n,
            a.shape(),
            b.len(),
            g.shape(),
            h.len()
        )));
    }
    Ok(())
}

/// Solve a convex QP with `Q` positive definite on the equality nullspace.
pub fn solve_qp(
    q: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    g: &DMatrix<f64>,
    h: &DVector<f64>,
    cfg: &IpmConfig,
) -> Result<QpSolution> {
    check_shapes(q, c, a, b, g, h)?;
    let n = c.len();
    let mi = h.len();
    let p = b.len();

    let scale = max_abs(q).max(max_abs_vec(c));
    let omega = if scale > 0.0 && scale.is_finite() { 1.0 / scale } else { 1.0 };
    let sp = Scaled { q: q * omega, c: c * omega, a, b, g, h };

    let (mut z, mut s, mut lam, mut nu, iterations) = ipm_iterate(&sp, cfg)?;

    // duals of the normalized problem are ω times the true ones
    let mut polished = false;
    if cfg.polish && mi > 0 {
        if let Some((zp, lp, np)) = polish(&sp, &z, &s, &lam) {
            let before = kkt_residual(&sp.q, &sp.c, a, b, g, h, &z, &lam, &nu);
            let after = kkt_residual(&sp.q, &sp.c, a, b, g, h, &zp, &lp, &np);
            if after <= before.max(cfg.tol) {
                s = h - g * &zp;
                z = zp;
                lam = lp;
                nu = np;
                polished = true;
            }
        }
    }
    if !polished && mi > 0 {
        s = h - g * &z;
    }

    let degenerate: Vec<usize> = (0..mi)
        .filter(|&j| lam[j] < DEGENERACY_TOL && s[j].abs() < DEGENERACY_TOL)
        .collect();
    let lambda = lam / omega;
    let nu = nu / omega;
    let resid = kkt_residual(q, c, a, b, g, h, &z, &lambda, &nu);
    debug_assert!(n == z.len() && p == nu.len());
    Ok(QpSolution {
        z,
        lambda,
        nu,
        slack: s,
        kkt_residual: resid,
        iterations,
        polished,
        degenerate,
        omega,
        q: q.clone(),
        a: a.clone(),
        g: g.clone(),
        kkt: OnceLock::new(),
    })
}

type IpmState = (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>, usize);

fn ipm_iterate(sp: &Scaled<'_>, cfg: &IpmConfig) -> Result<IpmState> {
    let (q, c, a, b, g, h) = (&sp.q, &sp.c, sp.a, sp.b, sp.g, sp.h);
    let n = c.len();
    let mi = h.len();
    let gt = g.transpose();
    let at = a.transpose();

    // initial point: minimize ½zᵀ(Q + GᵀG)z + (c − Gᵀh)ᵀz on Az = b
    let k0 = q + &gt * g;
    let init = Newton::factor(k0, a)
        .and_then(|f| f.solve(&(-c + &gt * h), b))
        .ok_or_else(|| IpoError::NotPositiveDefinite("QP initial system is singular".into()))?;
    let (mut z, mut nu) = init;
    if mi == 0 {
        return Ok((z, DVector::zeros(0), DVector::zeros(0), nu, 1));
    }
    let mut s = h - g * &z;
    let mut lam = DVector::from_element(mi, 1.0);
    let shift = (-1.5 * s.min()).max(0.0);
    s.add_scalar_mut(shift);
    if s.max() <= 0.0 {
        s.fill(1.0);
    }
    let sl = s.dot(&lam);
    s.add_scalar_mut(0.5 * sl / lam.sum());
    let sl = s.dot(&lam);
    lam.add_scalar_mut(0.5 * sl / s.sum());

    let c_norm = 1.0 + max_abs_vec(c);
    let b_norm = 1.0 + max_abs_vec(b);
    let h_norm = 1.0 + max_abs_vec(h);
    let mut last_res = f64::INFINITY;

    for it in 0..cfg.max_iter {
        let rd = q * &z + c + &at * &nu + &gt * &lam;
        let re = a * &z - b;
        let ri = g * &z + &s - h;
        let mu = s.dot(&lam) / mi as f64;
        let res = (rd.amax() / c_norm)
            .max(if re.is_empty() { 0.0 } else { re.amax() / b_norm })
            .max(ri.amax() / h_norm)
            .max(mu);
        let finite = [&rd, &re, &ri].iter().all(|r| r.iter().all(|v| v.is_finite())) && mu.is_finite();
        if !finite || mu > 1e30 || lam.amax() > 1e30 {
            break;
        }
        last_res = res;
        if res <= cfg.tol {
            return Ok((z, s, lam, nu, it));
        }

        let w = lam.component_div(&s);
        let mut k = q.clone();
        // K = Q + Gᵀ W G
        let wg = DMatrix::from_fn(mi, n, |r, col| w[r] * g[(r, col)]);
        k.gemm(1.0, &gt, &wg, 1.0);
        let Some(newton) = Newton::factor(k, a) else { break };

        let direction = |rc: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> {
            // rhs = −r_d + Gᵀ S⁻¹ (r_c − Λ r_i)
            let t = (rc - lam.component_mul(&ri)).component_div(&s);
            let r1 = -&rd + &gt * t;
            let (dz, dnu) = newton.solve(&r1, &(-&re))?;
            let gdz = g * &dz;
            let ds = -&ri - &gdz;
            let dlam = (-rc + lam.component_mul(&(&ri + &gdz))).component_div(&s);
            Some((dz, ds, dlam, dnu))
        };

        let rc_aff = s.component_mul(&lam);
        let Some((_, ds_a, dl_a, _)) = direction(&rc_aff) else { break };
        let alpha_aff = max_step(&s, &ds_a).min(max_step(&lam, &dl_a));
        let mu_aff = (&s + &ds_a * alpha_aff).dot(&(&lam + &dl_a * alpha_aff)) / mi as f64;
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);

        let mut rc = rc_aff + ds_a.component_mul(&dl_a);
        rc.add_scalar_mut(-sigma * mu);
        let Some((dz, ds, dlam, dnu)) = direction(&rc) else { break };
        let alpha = (0.99 * max_step(&s, &ds).min(max_step(&lam, &dlam))).min(1.0);

        z += &dz * alpha;
        s += &ds * alpha;
        lam += &dlam * alpha;
        nu += &dnu * alpha;
    }
    Err(IpoError::NonConvergence { iterations: cfg.max_iter, residual: last_res })
}

/// Exact solve on the active set suggested by the interior point iterate.
///
/// Starting from `{j : λ_j > s_j}`, the equality KKT system on the working set
/// is solved and the set repaired (drop the most negative multiplier, else add
/// the most violated row) until the KKT conditions hold. Badly scaled problems
/// leave the interior point iterate well short of machine precision, and a
/// wrong guess for one near-tight row is common; a few repairs fix it.
fn polish(
    sp: &Scaled<'_>,
    z: &DVector<f64>,
    s: &DVector<f64>,
    lam: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let (q, c, a, b, g, h) = (&sp.q, &sp.c, sp.a, sp.b, sp.g, sp.h);
    let n = z.len();
    let p = b.len();
    let feas_tol = 1e-12 * (1.0 + max_abs_vec(h));
    let mut active: Vec<usize> = (0..h.len()).filter(|&j| lam[j] > s[j]).collect();
    for _ in 0..=2 * h.len() + 2 {
        let na = active.len();
        if na + p > n {
            return None;
        }
        let dim = n + na + p;
        let mut m = DMatrix::zeros(dim, dim);
        m.view_mut((0, 0), (n, n)).copy_from(q);
        let mut rhs = DVector::zeros(dim);
        rhs.rows_mut(0, n).copy_from(&(-c));
        for (r, &j) in active.iter().enumerate() {
            for k in 0..n {
                m[(k, n + r)] = g[(j, k)];
                m[(n + r, k)] = g[(j, k)];
            }
            rhs[n + r] = h[j];
        }
        for r in 0..p {
            for k in 0..n {
                m[(k, n + na + r)] = a[(r, k)];
                m[(n + na + r, k)] = a[(r, k)];
            }
            rhs[n + na + r] = b[r];
        }
        let sol = LU::new(m).solve(&rhs)?;
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let (worst_r, worst) = (0..na).map(|r| (r, sol[n + r])).fold((usize::MAX, -1e-12), |acc, (r, v)| if v < acc.1 { (r, v) } else { acc });
        if worst < -1e-12 {
            active.remove(worst_r);
            continue;
        }
        let zp = sol.rows(0, n).into_owned();
        let gz = g * &zp;
        let violated = (0..h.len())
            .filter(|j| !active.contains(j))
            .map(|j| (j, gz[j] - h[j]))
            .fold((usize::MAX, feas_tol), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
        if violated.0 != usize::MAX {
            active.push(violated.0);
            active.sort_unstable();
            continue;
        }
        let mut lp = DVector::zeros(h.len());
        for (r, &j) in active.iter().enumerate() {
            lp[j] = sol[n + r].max(0.0);
        }
        let np = sol.rows(n + na, p).into_owned();
        return Some((zp, lp, np));
    }
    None
}

/// Verify `{Az = b, Gz ≤ h}` is nonempty by projecting the origin onto it.
pub fn check_feasible(a: &DMatrix<f64>, b: &DVector<f64>, g: &DMatrix<f64>, h: &DVector<f64>) -> Result<()> {
    let n = g.ncols();
    let q = DMatrix::identity(n, n);
    let c = DVector::zeros(n);
    let cfg = IpmConfig { tol: 1e-9, max_iter: 200, polish: true };
    match solve_qp(&q, &c, a, b, g, h, &cfg) {
        Ok(sol) => {
            let viol = (g * &sol.z - h).max().max(0.0).max(if a.nrows() > 0 { (a * &sol.z - b).amax() } else { 0.0 });
            if viol > 1e-8 * (1.0 + max_abs_vec(h).max(max_abs_vec(b))) {
                Err(IpoError::Infeasible(format!("constraint violation {viol:.3e} at best point")))
            } else {
                Ok(())
            }
        }
        Err(IpoError::NonConvergence { residual, .. }) => Err(IpoError::Infeasible(format!(
            "feasibility solve did not converge (residual {residual:.3e})"
        ))),
        Err(e) => Err(IpoError::Infeasible(e.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &l * l.transpose() + DMatrix::identity(n, n) * 0.1
    }

    #[test]
    fn box_qp_against_clipping() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.random_range(1..8);
            let d: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
            let q = DMatrix::from_diagonal(&DVector::from_vec(d.clone()));
            let c = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let gamma = rng.random_range(0.1..1.0);
            let mut g = DMatrix::zeros(2 * n, n);
            for j in 0..n {
                g[(j, j)] = 1.0;
                g[(n + j, j)] = -1.0;
            }
            let h = DVector::from_element(2 * n, gamma);
            let sol = solve_qp(&q, &c, &DMatrix::zeros(0, n), &DVector::zeros(0), &g, &h, &IpmConfig::default()).unwrap();
            for j in 0..n {
                let want = (-c[j] / d[j]).clamp(-gamma, gamma);
                assert!((sol.z[j] - want).abs() < 1e-10, "{} vs {want}", sol.z[j]);
            }
            assert!(sol.kkt_residual <= 1e-8);
        }
    }

    #[test]
    fn random_qps_satisfy_kkt() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..40 {
            let n = rng.random_range(2..10);
            let q = random_pd(&mut rng, n);
            let c = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
            let a = DMatrix::from_element(1, n, 1.0);
            let b = DVector::from_element(1, 0.0);
            let mi = rng.random_range(1..2 * n);
            let g = DMatrix::from_fn(mi, n, |_, _| rng.random_range(-1.0..1.0));
            let h = DVector::from_fn(mi, |_, _| rng.random_range(0.05..1.0));
            let sol = solve_qp(&q, &c, &a, &b, &g, &h, &IpmConfig::default()).unwrap();
            assert!(sol.kkt_residual <= 1e-8, "residual {}", sol.kkt_residual);
            assert!(sol.lambda.min() >= -1e-8);
        }
    }

    #[test]
    fn infeasible_box_is_reported() {
        let g = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let h = DVector::from_vec(vec![-1.0, -1.0]);
        assert!(matches!(
            check_feasible(&DMatrix::zeros(0, 1), &DVector::zeros(0), &g, &h),
            Err(IpoError::Infeasible(_))
        ));
    }
}
