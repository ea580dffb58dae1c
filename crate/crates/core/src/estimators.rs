//! Closed-form coefficient estimators: least squares, the analytic IPO
//! solutions for unconstrained and equality-constrained programs, their bias
//! and variance, and the tracking-error objective.

use nalgebra::{DMatrix, DVector};

use crate::error::{IpoError, Result};
use crate::linalg::{check_len, cholesky, condition_number, symmetrize};
use crate::model::{
    mvo_cost, residual_covariance, Coefficients, DesignMask, EstimatorTag, FeasibleRegion, Observation,
    ObservationPanel, RegionKind,
};
use crate::par::chunked_fold;
use crate::solver::{reduced_factor, solve_qp, IpmConfig, NullspaceReduction};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadCase {
    Unconstrained,
    Equality,
}

/// Which closed-form policy the MVO program has.
#[derive(Debug, Clone, Copy)]
pub enum IpoCase<'a> {
    Unconstrained,
    Equality(&'a NullspaceReduction),
}

impl<'a> IpoCase<'a> {
    pub fn from_region(region: &'a FeasibleRegion) -> Result<Self> {
        match region.kind() {
            RegionKind::Unconstrained => Ok(IpoCase::Unconstrained),
            RegionKind::Equality => Ok(IpoCase::Equality(region.reduction().expect("reduction present"))),
            RegionKind::Inequality => Err(IpoError::InvalidConfig(
                "analytic IPO needs an unconstrained or equality region; drop the inequalities first".into(),
            )),
        }
    }

}

/// `L(θ) = ½θᵀHθ − θᵀd + const`.
#[derive(Debug, Clone)]
pub struct IpoQuadratic {
    pub h: DMatrix<f64>,
    pub d: DVector<f64>,
    pub case: QuadCase,
    /// Features that are zero in every observation.
    pub zero_features: Vec<usize>,
    /// Some observation has every feature nonzero.
    pub has_full_observation: bool,
}

impl IpoQuadratic {
    pub fn objective(&self, theta: &DVector<f64>) -> f64 {
        0.5 * theta.dot(&(&self.h * theta)) - theta.dot(&self.d)
    }

    pub fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.h * theta - &self.d
    }
}

/// Optional regularization and constraints on θ.
#[derive(Debug, Clone, Default)]
pub struct ThetaConstraints {
    pub ridge_weight: f64,
    pub equality: Option<(DMatrix<f64>, DVector<f64>)>,
    pub inequality: Option<(DMatrix<f64>, DVector<f64>)>,
}

impl ThetaConstraints {
    pub fn none() -> Self {
        Self::default()
    }

    fn is_plain(&self) -> bool {
        self.ridge_weight == 0.0 && self.equality.is_none() && self.inequality.is_none()
    }
}

/// Affine policy `z*(ŷ) = Rŷ/δ + o` of an unconstrained or equality program.
pub(crate) struct Policy {
    pub r: DMatrix<f64>,
    pub o: DVector<f64>,
}

pub(crate) fn policy(obs: &Observation, case: IpoCase<'_>) -> Result<Policy> {
    let v_hat = obs.v_hat();
    let n = v_hat.dim();
    match case {
        IpoCase::Unconstrained => Ok(Policy {
            r: v_hat.solve_mat(&DMatrix::identity(n, n)),
            o: DVector::zeros(n),
        }),
        IpoCase::Equality(red) => {
            if red.f.nrows() != n {
                return Err(IpoError::dim(format!("nullspace basis has {} rows, d_z = {n}", red.f.nrows())));
            }
            let ch = reduced_factor(v_hat.matrix(), red)?;
            let r = &red.f * ch.solve(&red.f.transpose());
            let o = &red.z0 - &r * (v_hat.matrix() * &red.z0);
            Ok(Policy { r, o })
        }
    }
}

fn require_v_true(panel: &ObservationPanel) -> Result<()> {
    if !panel.has_v_true() {
        return Err(IpoError::Estimation(
            "realized covariance missing; attach v_true to every observation".into(),
        ));
    }
    Ok(())
}

fn feature_diagnostics(panel: &ObservationPanel) -> (Vec<usize>, bool) {
    let d_x = panel.d_x();
    let zero = (0..d_x).filter(|&k| panel.iter().all(|o| o.x[k] == 0.0)).collect();
    let full = panel.iter().any(|o| o.x.iter().all(|v| *v != 0.0));
    (zero, full)
}

struct Sums {
    h: DMatrix<f64>,
    d: DVector<f64>,
    du: DMatrix<f64>,
    e: DVector<f64>,
}

fn assemble_sums(
    panel: &ObservationPanel,
    p: &DesignMask,
    delta: f64,
    case: IpoCase<'_>,
    with_bias: bool,
) -> Result<Sums> {
    p.check_panel(panel)?;
    require_v_true(panel)?;
    let d_x = p.d_x();
    let obs = panel.observations();
    chunked_fold(
        obs.len(),
        || Sums {
            h: DMatrix::zeros(d_x, d_x),
            d: DVector::zeros(d_x),
            du: DMatrix::zeros(if with_bias { d_x } else { 0 }, if with_bias { d_x } else { 0 }),
            e: DVector::zeros(if with_bias { d_x } else { 0 }),
        },
        |acc, i| {
            let o = &obs[i];
            let pol = policy(o, case)?;
            let v = o.v_true().expect("checked").matrix();
            let same = o.v_true_shared().is_some_and(|t| std::sync::Arc::ptr_eq(t, o.v_hat_shared()));
            let rv = &pol.r * v;
            let rvr = if same && matches!(case, IpoCase::Unconstrained) { pol.r.clone() } else { &rv * &pol.r };
            p.add_congruence(&o.x, &rvr, 1.0, &mut acc.h);
            let vo = v * &pol.o * delta;
            acc.d += p.transpose_apply(&o.x, &(&pol.r * (&o.y - &vo)));
            if with_bias {
                p.add_congruence(&o.x, &pol.r, 1.0, &mut acc.du);
                acc.e -= p.transpose_apply(&o.x, &(&pol.r * vo));
            }
            Ok(())
        },
        |a, b| {
            a.h += b.h;
            a.d += b.d;
            a.du += b.du;
            a.e += b.e;
        },
    )
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(IpoError::InvalidConfig(format!("risk aversion must be positive, got {delta}")));
    }
    Ok(())
}

fn finish(panel: &ObservationPanel, delta: f64, case: QuadCase, sums: Sums) -> IpoQuadratic {
    let scale = 1.0 / (panel.len() as f64 * delta);
    let mut h = sums.h * scale;
    symmetrize(&mut h);
    let (zero_features, has_full_observation) = feature_diagnostics(panel);
    IpoQuadratic { h, d: sums.d * scale, case, zero_features, has_full_observation }
}

/// `H = (1/mδ) Σ diag(x)PᵀV̂⁻¹VV̂⁻¹P diag(x)`, `d = (1/mδ) Σ diag(x)PᵀV̂⁻¹y`.
pub fn assemble_unconstrained(panel: &ObservationPanel, p: &DesignMask, delta: f64) -> Result<IpoQuadratic> {
    check_delta(delta)?;
    let sums = assemble_sums(panel, p, delta, IpoCase::Unconstrained, false)?;
    Ok(finish(panel, delta, QuadCase::Unconstrained, sums))
}

/// Equality-case quadratic with `R = F(FᵀV̂F)⁻¹Fᵀ` in place of `V̂⁻¹` and the
/// offset `d = (1/mδ) Σ diag(x)PᵀR(y − δV(I − RV̂)z0)`.
///
/// The δ on the offset term comes from substituting the policy into the MVO
/// cost; without it the quadratic only matches the empirical loss at δ = 1.
pub fn assemble_equality(
    panel: &ObservationPanel,
    p: &DesignMask,
    delta: f64,
    red: &NullspaceReduction,
) -> Result<IpoQuadratic> {
    check_delta(delta)?;
    let sums = assemble_sums(panel, p, delta, IpoCase::Equality(red), false)?;
    Ok(finish(panel, delta, QuadCase::Equality, sums))
}

pub fn assemble(panel: &ObservationPanel, p: &DesignMask, delta: f64, case: IpoCase<'_>) -> Result<IpoQuadratic> {
    match case {
        IpoCase::Unconstrained => assemble_unconstrained(panel, p, delta),
        IpoCase::Equality(red) => assemble_equality(panel, p, delta, red),
    }
}

fn singular_h_error(q: &IpoQuadratic) -> IpoError {
    if q.zero_features.is_empty() {
        IpoError::Estimation(format!(
            "H is not positive definite{}",
            if q.has_full_observation { "" } else { " (no observation has every feature nonzero)" }
        ))
    } else {
        IpoError::Estimation(format!("H is singular: features {:?} are zero in every observation", q.zero_features))
    }
}

/// Minimizer of `½θᵀ(H + ridge·I)θ − θᵀd` subject to optional constraints on θ.
pub fn solve_ipo(q: &IpoQuadratic, cons: &ThetaConstraints) -> Result<Coefficients> {
    let tag = match q.case {
        QuadCase::Unconstrained => EstimatorTag::IpoUncon,
        QuadCase::Equality => EstimatorTag::IpoEq,
    };
    let d_x = q.d.len();
    if cons.ridge_weight < 0.0 {
        return Err(IpoError::InvalidConfig("ridge weight must be non-negative".into()));
    }
    let h = &q.h + DMatrix::identity(d_x, d_x) * cons.ridge_weight;
    if cons.is_plain() {
        let ch = cholesky(&h, "H").map_err(|_| singular_h_error(q))?;
        if condition_number(&h) > 1e14 {
            return Err(singular_h_error(q));
        }
        return Coefficients::new(ch.solve(&q.d), tag);
    }
    let (a, b) = cons.equality.clone().unwrap_or_else(|| (DMatrix::zeros(0, d_x), DVector::zeros(0)));
    let (g, hv) = cons.inequality.clone().unwrap_or_else(|| (DMatrix::zeros(0, d_x), DVector::zeros(0)));
    if a.ncols() != d_x || g.ncols() != d_x {
        return Err(IpoError::dim("θ constraint matrices must have d_x columns"));
    }
    if cons.ridge_weight == 0.0 && cholesky(&h, "H").is_err() {
        return Err(singular_h_error(q));
    }
    if g.nrows() > 0 {
        crate::solver::ipm::check_feasible(&a, &b, &g, &hv)?;
    }
    let sol = solve_qp(&h, &(-&q.d), &a, &b, &g, &hv, &IpmConfig::default())?;
    Coefficients::new(sol.z, tag)
}

/// Multiplicative and additive terms of `E[θ*] = Bθ + c`.
#[derive(Debug, Clone)]
pub struct BiasTerms {
    /// `B = H⁻¹ d_u`.
    pub multiplier: DMatrix<f64>,
    /// Zero unless the equality system has `z0 ≠ 0` and `V̂ ≠ V`.
    pub offset: DVector<f64>,
    pub h: DMatrix<f64>,
    pub d_u: DMatrix<f64>,
    /// `H c`.
    pub e: DVector<f64>,
}

pub fn bias_terms(panel: &ObservationPanel, p: &DesignMask, delta: f64, case: IpoCase<'_>) -> Result<BiasTerms> {
    check_delta(delta)?;
    let sums = assemble_sums(panel, p, delta, case, true)?;
    let scale = 1.0 / (panel.len() as f64 * delta);
    let mut h = &sums.h * scale;
    symmetrize(&mut h);
    let mut d_u = &sums.du * scale;
    symmetrize(&mut d_u);
    let e = &sums.e * scale;
    let ch = cholesky(&h, "H").map_err(|_| IpoError::Estimation("H is not positive definite".into()))?;
    Ok(BiasTerms { multiplier: ch.solve(&d_u), offset: ch.solve(&e), h, d_u, e })
}

/// `B` with `E[θ*] = Bθ` (plus the offset of [`bias_terms`] when present).
pub fn bias_multiplier(panel: &ObservationPanel, p: &DesignMask, delta: f64, case: IpoCase<'_>) -> Result<DMatrix<f64>> {
    bias_terms(panel, p, delta, case).map(|t| t.multiplier)
}

/// `θ_u = d_u⁻¹(Hθ* − e)`.
pub fn unbias(terms: &BiasTerms, theta: &Coefficients) -> Result<Coefficients> {
    check_len(&theta.theta, terms.h.nrows(), "theta")?;
    let ch = cholesky(&terms.d_u, "d_u").map_err(|_| IpoError::Estimation("d_u is not positive definite".into()))?;
    Coefficients::new(ch.solve(&(&terms.h * &theta.theta - &terms.e)), EstimatorTag::IpoUnbiased)
}

/// `H⁻¹MH⁻¹` for a given residual covariance.
pub fn theta_variance_with(
    panel: &ObservationPanel,
    p: &DesignMask,
    delta: f64,
    case: IpoCase<'_>,
    sigma_hat: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_delta(delta)?;
    let q = assemble(panel, p, delta, case)?;
    let d_x = p.d_x();
    let obs = panel.observations();
    let mut m_sum = chunked_fold(
        obs.len(),
        || DMatrix::zeros(d_x, d_x),
        |acc, i| {
            let pol = policy(&obs[i], case)?;
            let rsr = &pol.r * sigma_hat * &pol.r;
            p.add_congruence(&obs[i].x, &rsr, 1.0, acc);
            Ok(())
        },
        |a, b| *a += b,
    )?;
    let md = panel.len() as f64 * delta;
    m_sum /= md * md;
    let ch = cholesky(&q.h, "H").map_err(|_| singular_h_error(&q))?;
    let left = ch.solve(&m_sum);
    let mut var = ch.solve(&left.transpose());
    symmetrize(&mut var);
    Ok(var)
}

/// `Var(θ*)` using the residual covariance at `theta`.
pub fn theta_variance(
    panel: &ObservationPanel,
    p: &DesignMask,
    delta: f64,
    theta: &DVector<f64>,
    case: IpoCase<'_>,
) -> Result<DMatrix<f64>> {
    let sigma = residual_covariance(panel, p, theta)?;
    theta_variance_with(panel, p, delta, case, &sigma.sigma_hat)
}

/// Least squares over the pooled panel, with sandwich standard errors from
/// the residual covariance.
pub fn fit_ols(panel: &ObservationPanel, p: &DesignMask) -> Result<Coefficients> {
    p.check_panel(panel)?;
    let d_x = p.d_x();
    let d_z = p.d_z();
    let eye = DMatrix::identity(d_z, d_z);
    let obs = panel.observations();
    let (mut xtx, xty) = chunked_fold(
        obs.len(),
        || (DMatrix::zeros(d_x, d_x), DVector::zeros(d_x)),
        |acc, i| {
            p.add_congruence(&obs[i].x, &eye, 1.0, &mut acc.0);
            acc.1 += p.transpose_apply(&obs[i].x, &obs[i].y);
            Ok(())
        },
        |a, b| {
            a.0 += b.0;
            a.1 += b.1;
        },
    )?;
    symmetrize(&mut xtx);
    let (zero, _) = feature_diagnostics(panel);
    let rank_err = || {
        IpoError::Estimation(if zero.is_empty() {
            "design matrix is rank deficient".to_string()
        } else {
            format!("design matrix is rank deficient: features {zero:?} are zero in every observation")
        })
    };
    if !zero.is_empty() || condition_number(&xtx) > 1e13 {
        return Err(rank_err());
    }
    let ch = cholesky(&xtx, "XᵀX").map_err(|_| rank_err())?;
    let theta = ch.solve(&xty);
    let coef = Coefficients::new(theta, EstimatorTag::Ols)?;
    if panel.len() < 2 {
        return Ok(coef);
    }
    let sigma = residual_covariance(panel, p, &coef.theta)?.sigma_hat;
    let meat = chunked_fold(
        obs.len(),
        || DMatrix::zeros(d_x, d_x),
        |acc, i| {
            p.add_congruence(&obs[i].x, &sigma, 1.0, acc);
            Ok(())
        },
        |a, b| *a += b,
    )?;
    let cov = ch.solve(&ch.solve(&meat).transpose());
    let se = DVector::from_iterator(d_x, (0..d_x).map(|k| cov[(k, k)].max(0.0).sqrt()));
    coef.with_std_err(se)
}

/// Analytic IPO fit with standard errors. Inequality rows of `region` are
/// dropped, leaving the unconstrained or equality program.
pub fn fit_ipo(
    panel: &ObservationPanel,
    p: &DesignMask,
    region: &FeasibleRegion,
    cons: &ThetaConstraints,
) -> Result<Coefficients> {
    let relaxed = region.without_inequalities();
    let case = IpoCase::from_region(&relaxed)?;
    let q = assemble(panel, p, relaxed.delta(), case)?;
    let coef = solve_ipo(&q, cons)?;
    if panel.len() < 2 || !cons.is_plain() {
        return Ok(coef);
    }
    let var = theta_variance(panel, p, relaxed.delta(), &coef.theta, case)?;
    let se = DVector::from_iterator(var.nrows(), (0..var.nrows()).map(|k| var[(k, k)].max(0.0).sqrt()));
    coef.with_std_err(se)
}

/// Closed-form optimal weights for one observation under `case`.
pub fn policy_weights(obs: &Observation, case: IpoCase<'_>, y_hat: &DVector<f64>, delta: f64) -> Result<DVector<f64>> {
    let pol = policy(obs, case)?;
    Ok(&pol.r * y_hat / delta + &pol.o)
}

/// Empirical MVO cost `(1/m) Σ c(z*(ŷ), y)` for an unconstrained or equality region.
pub fn ipo_loss(panel: &ObservationPanel, p: &DesignMask, theta: &DVector<f64>, region: &FeasibleRegion) -> Result<f64> {
    p.check_panel(panel)?;
    require_v_true(panel)?;
    check_len(theta, p.d_x(), "theta")?;
    let case = IpoCase::from_region(region)?;
    let delta = region.delta();
    let obs = panel.observations();
    let total = chunked_fold(
        obs.len(),
        || 0.0,
        |acc, i| {
            let o = &obs[i];
            let z = policy_weights(o, case, &p.apply(&o.x, theta), delta)?;
            *acc += mvo_cost(&z, &o.y, o.v_true().expect("checked").matrix(), delta)?;
            Ok(())
        },
        |a, b| *a += b,
    )?;
    Ok(total / panel.len() as f64)
}

/// `(1/2m) Σ ‖z*(ŷ) − z*(y)‖²_V` where the ex-post optimum uses the realized covariance.
pub fn tracking_error_loss(
    panel: &ObservationPanel,
    p: &DesignMask,
    theta: &DVector<f64>,
    policy_region: &FeasibleRegion,
) -> Result<f64> {
    p.check_panel(panel)?;
    require_v_true(panel)?;
    check_len(theta, p.d_x(), "theta")?;
    let case = IpoCase::from_region(policy_region)?;
    let delta = policy_region.delta();
    let obs = panel.observations();
    let total = chunked_fold(
        obs.len(),
        || 0.0,
        |acc, i| {
            let o = &obs[i];
            let v = o.v_true().expect("checked");
            let z_hat = policy_weights(o, case, &p.apply(&o.x, theta), delta)?;
            let ex_post = Observation::from_shared(
                o.x.clone(),
                o.y.clone(),
                o.v_true_shared().expect("checked").clone(),
                None,
            )?;
            let z_true = policy_weights(&ex_post, case, &o.y, delta)?;
            let diff = z_hat - z_true;
            *acc += diff.dot(&(v.matrix() * &diff));
            Ok(())
        },
        |a, b| *a += b,
    )?;
    Ok(total / (2.0 * panel.len() as f64))
}
