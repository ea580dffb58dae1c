//! Mean-variance portfolio solvers: closed forms for the unconstrained and
//! equality cases, interior point for inequalities.

pub mod ipm;
pub mod nullspace;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

pub use ipm::{solve_qp, IpmConfig, QpSolution};
pub use nullspace::{nullspace_reduce, NullspaceReduction};

use crate::error::{IpoError, Result};
use crate::linalg::{check_len, check_square, cholesky};
use crate::model::{FeasibleRegion, RegionKind};

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(IpoError::InvalidConfig(format!("risk aversion must be positive, got {delta}")));
    }
    Ok(())
}

/// `z* = V̂⁻¹ŷ / δ`.
pub fn solve_unconstrained(y_hat: &DVector<f64>, v_hat: &DMatrix<f64>, delta: f64) -> Result<DVector<f64>> {
    check_delta(delta)?;
    check_square(v_hat, y_hat.len(), "v_hat")?;
    let ch = cholesky(v_hat, "v_hat")?;
    Ok(solve_unconstrained_factored(y_hat, &ch, delta))
}

pub fn solve_unconstrained_factored(y_hat: &DVector<f64>, v_hat: &Cholesky<f64, Dyn>, delta: f64) -> DVector<f64> {
    v_hat.solve(y_hat) / delta
}

/// Reduced Hessian factor for the equality case: Cholesky of `FᵀV̂F`.
pub fn reduced_factor(v_hat: &DMatrix<f64>, red: &NullspaceReduction) -> Result<Cholesky<f64, Dyn>> {
    let ftvf = red.f.transpose() * v_hat * &red.f;
    cholesky(&ftvf, "FᵀV̂F")
}

/// `z* = F w* + z0`, `w* = (1/δ)(FᵀV̂F)⁻¹Fᵀ(ŷ − δV̂z0)`.
pub fn solve_equality(
    y_hat: &DVector<f64>,
    v_hat: &DMatrix<f64>,
    delta: f64,
    red: &NullspaceReduction,
) -> Result<DVector<f64>> {
    check_delta(delta)?;
    check_square(v_hat, y_hat.len(), "v_hat")?;
    check_len(&red.z0, y_hat.len(), "z0")?;
    let ch = reduced_factor(v_hat, red)?;
    Ok(solve_equality_factored(y_hat, v_hat, delta, red, &ch))
}

pub fn solve_equality_factored(
    y_hat: &DVector<f64>,
    v_hat: &DMatrix<f64>,
    delta: f64,
    red: &NullspaceReduction,
    ftvf: &Cholesky<f64, Dyn>,
) -> DVector<f64> {
    let rhs = red.f.tr_mul(&(y_hat - v_hat * &red.z0 * delta));
    let w = ftvf.solve(&rhs) / delta;
    &red.f * w + &red.z0
}

/// Interior-point solve of the MVO program over `region`.
pub fn solve_inequality(
    y_hat: &DVector<f64>,
    v_hat: &DMatrix<f64>,
    region: &FeasibleRegion,
    cfg: &IpmConfig,
) -> Result<QpSolution> {
    check_len(y_hat, region.d_z(), "y_hat")?;
    check_square(v_hat, region.d_z(), "v_hat")?;
    let q = v_hat * region.delta();
    solve_qp(&q, &(-y_hat), region.a(), region.b(), region.g(), region.h(), cfg)
}

/// Optimal weights for any region kind.
pub fn solve_region(
    y_hat: &DVector<f64>,
    v_hat: &DMatrix<f64>,
    region: &FeasibleRegion,
    cfg: &IpmConfig,
) -> Result<DVector<f64>> {
    match region.kind() {
        RegionKind::Unconstrained => solve_unconstrained(y_hat, v_hat, region.delta()),
        RegionKind::Equality => {
            let red = region.reduction().expect("equality region carries its reduction");
            solve_equality(y_hat, v_hat, region.delta(), red)
        }
        RegionKind::Inequality => {
            let relaxed = match region.reduction() {
                Some(red) => solve_equality(y_hat, v_hat, region.delta(), red)?,
                None => solve_unconstrained(y_hat, v_hat, region.delta())?,
            };
            if strictly_interior(&relaxed, region) {
                return Ok(relaxed);
            }
            solve_inequality(y_hat, v_hat, region, cfg).map(|s| s.z)
        }
    }
}

/// True when every inequality of `region` holds at `z` with slack above
/// `1e-9·(1 + |h_j|)`. The optimum without the inequalities is then also the
/// constrained optimum, with no active constraints.
pub fn strictly_interior(z: &DVector<f64>, region: &FeasibleRegion) -> bool {
    let gz = region.g() * z;
    gz.iter().zip(region.h().iter()).all(|(l, h)| h - l > 1e-9 * (1.0 + h.abs()))
}
