//! Shared data model: observations, panels, the design mask, coefficients and
//! feasible regions.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{IpoError, Result};
use crate::linalg::{check_len, check_square, is_symmetric};
use crate::solver::nullspace::{nullspace_reduce, NullspaceReduction};

const SYMMETRY_TOL: f64 = 1e-12;

/// A validated symmetric positive definite matrix together with its Cholesky
/// factor. Shared between observations through `Arc` when the same estimate
/// is reused.
#[derive(Clone)]
pub struct FactoredCov {
    matrix: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl fmt::Debug for FactoredCov {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FactoredCov").field("matrix", &self.matrix).finish()
    }
}

impl FactoredCov {
    pub fn new(matrix: DMatrix<f64>, context: &str) -> Result<Self> {
        if !matrix.is_square() {
            return Err(IpoError::dim(format!(
                "{context}: covariance must be square, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(IpoError::NotPositiveDefinite(format!("{context}: non-finite entries")));
        }
        if !is_symmetric(&matrix, SYMMETRY_TOL) {
            return Err(IpoError::NotSymmetric(context.to_string()));
        }
        let chol = Cholesky::new(matrix.clone())
            .ok_or_else(|| IpoError::NotPositiveDefinite(context.to_string()))?;
        Ok(FactoredCov { matrix, chol })
    }

    pub fn shared(matrix: DMatrix<f64>, context: &str) -> Result<Arc<Self>> {
        Self::new(matrix, context).map(Arc::new)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn chol(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `V⁻¹ v`.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    pub fn solve_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(m)
    }
}

/// One record `(x, y, V̂, V)`.
#[derive(Debug, Clone)]
pub struct Observation {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    v_hat: Arc<FactoredCov>,
    v_true: Option<Arc<FactoredCov>>,
}

impl Observation {
    pub fn new(
        x: DVector<f64>,
        y: DVector<f64>,
        v_hat: DMatrix<f64>,
        v_true: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let v_hat = FactoredCov::shared(v_hat, "v_hat")?;
        let v_true = v_true.map(|v| FactoredCov::shared(v, "v_true")).transpose()?;
        Self::from_shared(x, y, v_hat, v_true)
    }

    pub fn from_shared(
        x: DVector<f64>,
        y: DVector<f64>,
        v_hat: Arc<FactoredCov>,
        v_true: Option<Arc<FactoredCov>>,
    ) -> Result<Self> {
        let d_z = y.len();
        if v_hat.dim() != d_z {
            return Err(IpoError::dim(format!("v_hat is {0}x{0} but y has length {d_z}", v_hat.dim())));
        }
        if let Some(v) = &v_true {
            if v.dim() != d_z {
                return Err(IpoError::dim(format!("v_true is {0}x{0} but y has length {d_z}", v.dim())));
            }
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(IpoError::Ingestion("non-finite feature or return value".into()));
        }
        Ok(Observation { x, y, v_hat, v_true })
    }

    pub fn v_hat(&self) -> &FactoredCov {
        &self.v_hat
    }

    pub fn v_hat_shared(&self) -> &Arc<FactoredCov> {
        &self.v_hat
    }

    pub fn v_true(&self) -> Option<&FactoredCov> {
        self.v_true.as_deref()
    }

    pub fn v_true_shared(&self) -> Option<&Arc<FactoredCov>> {
        self.v_true.as_ref()
    }

    /// Realized covariance, falling back to the estimate when no truth is attached.
    pub fn v_realized(&self) -> &FactoredCov {
        self.v_true.as_deref().unwrap_or(&self.v_hat)
    }

    pub fn with_returns(&self, y: DVector<f64>) -> Result<Self> {
        check_len(&y, self.y.len(), "replacement returns")?;
        Ok(Observation { y, ..self.clone() })
    }
}

/// Aligned sequence of observations with common dimensions. Immutable.
#[derive(Debug, Clone)]
pub struct ObservationPanel {
    obs: Vec<Observation>,
    d_x: usize,
    d_z: usize,
}

impl ObservationPanel {
    pub fn new(obs: Vec<Observation>) -> Result<Self> {
        let first = obs
            .first()
            .ok_or(IpoError::InsufficientSample { needed: 1, got: 0 })?;
        let (d_x, d_z) = (first.x.len(), first.y.len());
        for (i, o) in obs.iter().enumerate() {
            if o.x.len() != d_x || o.y.len() != d_z {
                return Err(IpoError::dim(format!(
                    "observation {i} has d_x={}, d_z={} (expected {d_x}, {d_z})",
                    o.x.len(),
                    o.y.len()
                )));
            }
        }
        Ok(ObservationPanel { obs, d_x, d_z })
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    pub fn observations(&self) -> &[Observation] {
        &self.obs
    }

    pub fn get(&self, i: usize) -> &Observation {
        &self.obs[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Observation> {
        self.obs.iter()
    }

    pub fn has_v_true(&self) -> bool {
        self.obs.iter().all(|o| o.v_true.is_some())
    }

    /// Panel restricted to the given indices (in the order given).
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let obs = idx
            .iter()
            .map(|&i| {
                self.obs.get(i).cloned().ok_or_else(|| {
                    IpoError::dim(format!("index {i} out of range for panel of length {}", self.len()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(obs)
    }

    pub fn range(&self, range: std::ops::Range<usize>) -> Result<Self> {
        let idx: Vec<usize> = range.collect();
        self.subset(&idx)
    }

    /// Same panel with every return vector replaced.
    pub fn with_returns(&self, ys: &[DVector<f64>]) -> Result<Self> {
        if ys.len() != self.len() {
            return Err(IpoError::dim(format!("{} return vectors for {} observations", ys.len(), self.len())));
        }
        let obs = self
            .obs
            .iter()
            .zip(ys)
            .map(|(o, y)| o.with_returns(y.clone()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(obs)
    }
}

/// Binary matrix `P` (d_z × d_x) assigning features to assets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignMask {
    d_x: usize,
    sets: Vec<Vec<usize>>,
    /// For each feature, the assets it feeds.
    owners: Vec<Vec<usize>>,
}

impl DesignMask {
    /// `P = I`: one feature per asset.
    pub fn identity(d_z: usize) -> Self {
        Self::from_index_sets((0..d_z).map(|j| vec![j]).collect(), d_z).expect("identity mask is valid")
    }

    /// `k` consecutive features per asset: a(j) = {kj, ..., kj + k − 1}.
    pub fn block(d_z: usize, k: usize) -> Self {
        Self::from_index_sets((0..d_z).map(|j| (k * j..k * (j + 1)).collect()).collect(), k * d_z)
            .expect("block mask is valid")
    }

    pub fn from_index_sets(sets: Vec<Vec<usize>>, d_x: usize) -> Result<Self> {
        let mut owners = vec![Vec::new(); d_x];
        for (j, set) in sets.iter().enumerate() {
            let mut sorted = set.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != set.len() {
                return Err(IpoError::InvalidConfig(format!("asset {j} lists a feature twice")));
            }
            for &k in set {
                if k >= d_x {
                    return Err(IpoError::dim(format!("asset {j} references feature {k} but d_x = {d_x}")));
                }
                owners[k].push(j);
            }
        }
        if let Some(k) = owners.iter().position(|o| o.is_empty()) {
            return Err(IpoError::InvalidConfig(format!("feature {k} feeds no asset")));
        }
        Ok(DesignMask { d_x, sets, owners })
    }

    pub fn from_matrix(p: &DMatrix<f64>) -> Result<Self> {
        let mut sets = Vec::with_capacity(p.nrows());
        for j in 0..p.nrows() {
            let mut set = Vec::new();
            for k in 0..p.ncols() {
                let v = p[(j, k)];
                if v == 1.0 {
                    set.push(k);
                } else if v != 0.0 {
                    return Err(IpoError::InvalidConfig(format!("P[{j},{k}] = {v} is not binary")));
                }
            }
            sets.push(set);
        }
        Self::from_index_sets(sets, p.ncols())
    }

    pub fn d_z(&self) -> usize {
        self.sets.len()
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn index_set(&self, j: usize) -> &[usize] {
        &self.sets[j]
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(self.d_z(), self.d_x);
        for (j, set) in self.sets.iter().enumerate() {
            for &k in set {
                p[(j, k)] = 1.0;
            }
        }
        p
    }

    fn single_owner(&self) -> bool {
        self.owners.iter().all(|o| o.len() == 1)
    }

    /// `P diag(x) θ`.
    pub fn apply(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.d_z(),
            self.sets.iter().map(|set| set.iter().map(|&k| x[k] * theta[k]).sum::<f64>()),
        )
    }

    /// `diag(x) Pᵀ g`.
    pub fn transpose_apply(&self, x: &DVector<f64>, g: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.d_x,
            self.owners
                .iter()
                .enumerate()
                .map(|(k, o)| x[k] * o.iter().map(|&j| g[j]).sum::<f64>()),
        )
    }

    /// Dense `B = P diag(x)` (d_z × d_x).
    pub fn design(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.d_z(), self.d_x);
        for (j, set) in self.sets.iter().enumerate() {
            for &k in set {
                b[(j, k)] = x[k];
            }
        }
        b
    }

    /// `diag(x) Pᵀ M P diag(x)` accumulated into `out` with weight `w`.
    pub fn add_congruence(&self, x: &DVector<f64>, m: &DMatrix<f64>, w: f64, out: &mut DMatrix<f64>) {
        if self.single_owner() {
            let owner: Vec<usize> = self.owners.iter().map(|o| o[0]).collect();
            for l in 0..self.d_x {
                let wl = w * x[l];
                if wl == 0.0 {
                    continue;
                }
                let ol = owner[l];
                for k in 0..self.d_x {
                    out[(k, l)] += x[k] * m[(owner[k], ol)] * wl;
                }
            }
        } else {
            let b = self.design(x);
            out.gemm_tr(w, &b, &(m * &b), 1.0);
        }
    }

    /// `diag(x) Pᵀ M P diag(x)`.
    pub fn congruence(&self, x: &DVector<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.d_x, self.d_x);
        self.add_congruence(x, m, 1.0, &mut out);
        out
    }

    /// `diag(x) Pᵀ M` (d_x × n) for a d_z × n matrix `M`.
    pub fn transpose_apply_mat(&self, x: &DVector<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.d_x, m.ncols());
        for (k, o) in self.owners.iter().enumerate() {
            for c in 0..m.ncols() {
                out[(k, c)] = x[k] * o.iter().map(|&j| m[(j, c)]).sum::<f64>();
            }
        }
        out
    }

    pub fn check_panel(&self, panel: &ObservationPanel) -> Result<()> {
        if panel.d_x() != self.d_x || panel.d_z() != self.d_z() {
            return Err(IpoError::dim(format!(
                "design mask is {}x{} but panel has d_z={}, d_x={}",
                self.d_z(),
                self.d_x,
                panel.d_z(),
                panel.d_x()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorTag {
    #[serde(rename = "OLS")]
    Ols,
    #[serde(rename = "IPO-UNCON")]
    IpoUncon,
    #[serde(rename = "IPO-EQ")]
    IpoEq,
    #[serde(rename = "IPO-GRAD")]
    IpoGrad,
    #[serde(rename = "IPO-UNBIASED")]
    IpoUnbiased,
}

impl fmt::Display for EstimatorTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorTag::Ols => "OLS",
            EstimatorTag::IpoUncon => "IPO-UNCON",
            EstimatorTag::IpoEq => "IPO-EQ",
            EstimatorTag::IpoGrad => "IPO-GRAD",
            EstimatorTag::IpoUnbiased => "IPO-UNBIASED",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub theta: DVector<f64>,
    pub std_err: Option<DVector<f64>>,
    pub tag: EstimatorTag,
}

impl Coefficients {
    pub fn new(theta: DVector<f64>, tag: EstimatorTag) -> Result<Self> {
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(IpoError::Estimation(format!("{tag}: non-finite coefficient")));
        }
        Ok(Coefficients { theta, std_err: None, tag })
    }

    pub fn with_std_err(mut self, se: DVector<f64>) -> Result<Self> {
        check_len(&se, self.theta.len(), "std_err")?;
        if se.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(IpoError::Estimation(format!("{}: invalid standard error", self.tag)));
        }
        self.std_err = Some(se);
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionKind {
    Unconstrained,
    Equality,
    Inequality,
}

/// Feasible set `S` plus the risk aversion δ.
#[derive(Debug, Clone)]
pub struct FeasibleRegion {
    kind: RegionKind,
    delta: f64,
    d_z: usize,
    a: DMatrix<f64>,
    b: DVector<f64>,
    g: DMatrix<f64>,
    h: DVector<f64>,
    reduction: Option<NullspaceReduction>,
}

impl FeasibleRegion {
    fn check_delta(delta: f64) -> Result<()> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(IpoError::InvalidConfig(format!("risk aversion must be positive, got {delta}")));
        }
        Ok(())
    }

    pub fn unconstrained(d_z: usize, delta: f64) -> Result<Self> {
        Self::check_delta(delta)?;
        Ok(FeasibleRegion {
            kind: RegionKind::Unconstrained,
            delta,
            d_z,
            a: DMatrix::zeros(0, d_z),
            b: DVector::zeros(0),
            g: DMatrix::zeros(0, d_z),
            h: DVector::zeros(0),
            reduction: None,
        })
    }

    pub fn equality(a: DMatrix<f64>, b: DVector<f64>, delta: f64) -> Result<Self> {
        Self::check_delta(delta)?;
        let d_z = a.ncols();
        let red = nullspace_reduce(&a, &b)?;
        Ok(FeasibleRegion {
            kind: RegionKind::Equality,
            delta,
            d_z,
            a,
            b,
            g: DMatrix::zeros(0, d_z),
            h: DVector::zeros(0),
            reduction: Some(red),
        })
    }

    /// `{Az = b, Gz ≤ h}`. `a` may have zero rows.
    pub fn inequality(
        a: DMatrix<f64>,
        b: DVector<f64>,
        g: DMatrix<f64>,
        h: DVector<f64>,
        delta: f64,
    ) -> Result<Self> {
        Self::check_delta(delta)?;
        let d_z = g.ncols();
        if a.ncols() != d_z || a.nrows() != b.len() || g.nrows() != h.len() {
            return Err(IpoError::dim(format!(
                "constraint shapes: A {}x{}, b {}, G {}x{}, h {}",
                a.nrows(),
                a.ncols(),
                b.len(),
                g.nrows(),
                g.ncols(),
                h.len()
            )));
        }
        if g.nrows() == 0 {
            return if a.nrows() == 0 {
                Self::unconstrained(d_z, delta)
            } else {
                Self::equality(a, b, delta)
            };
        }
        let reduction = if a.nrows() > 0 { Some(nullspace_reduce(&a, &b)?) } else { None };
        let region = FeasibleRegion {
            kind: RegionKind::Inequality,
            delta,
            d_z,
            a,
            b,
            g,
            h,
            reduction,
        };
        crate::solver::ipm::check_feasible(&region.a, &region.b, &region.g, &region.h)?;
        Ok(region)
    }

    /// `1ᵀz = budget`.
    pub fn budget(d_z: usize, budget: f64, delta: f64) -> Result<Self> {
        Self::equality(DMatrix::from_element(1, d_z, 1.0), DVector::from_element(1, budget), delta)
    }

    /// `−γ ≤ z ≤ γ`, optionally with `1ᵀz = budget`.
    pub fn boxed(d_z: usize, gamma: f64, budget: Option<f64>, delta: f64) -> Result<Self> {
        if !(gamma > 0.0) {
            return Err(IpoError::InvalidConfig(format!("box half-width must be positive, got {gamma}")));
        }
        let mut g = DMatrix::zeros(2 * d_z, d_z);
        for j in 0..d_z {
            g[(j, j)] = 1.0;
            g[(d_z + j, j)] = -1.0;
        }
        let h = DVector::from_element(2 * d_z, gamma);
        let (a, b) = match budget {
            Some(v) => (DMatrix::from_element(1, d_z, 1.0), DVector::from_element(1, v)),
            None => (DMatrix::zeros(0, d_z), DVector::zeros(0)),
        };
        Self::inequality(a, b, g, h, delta)
    }

    pub fn kind(&self) -> RegionKind {
        self.kind
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn h(&self) -> &DVector<f64> {
        &self.h
    }

    pub fn reduction(&self) -> Option<&NullspaceReduction> {
        self.reduction.as_ref()
    }

    pub fn has_equalities(&self) -> bool {
        self.a.nrows() > 0
    }

    /// Same region with a different δ.
    pub fn with_delta(&self, delta: f64) -> Result<Self> {
        Self::check_delta(delta)?;
        Ok(FeasibleRegion { delta, ..self.clone() })
    }

    /// The region with its inequality rows removed.
    pub fn without_inequalities(&self) -> Self {
        let kind = if self.has_equalities() { RegionKind::Equality } else { RegionKind::Unconstrained };
        FeasibleRegion {
            kind,
            g: DMatrix::zeros(0, self.d_z),
            h: DVector::zeros(0),
            ..self.clone()
        }
    }

    /// Largest constraint violation of `z`.
    pub fn violation(&self, z: &DVector<f64>) -> f64 {
        let eq = (&self.a * z - &self.b).amax();
        let iq = (&self.g * z - &self.h).iter().fold(0.0_f64, |m, v| m.max(*v));
        eq.max(iq)
    }
}

/// Empirical residual covariance `Σ̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualCovariance {
    pub sigma_hat: DMatrix<f64>,
}

/// `ŷ = P diag(x) θ`.
pub fn predict_returns(x: &DVector<f64>, p: &DesignMask, theta: &DVector<f64>) -> Result<DVector<f64>> {
    check_len(x, p.d_x(), "features")?;
    check_len(theta, p.d_x(), "theta")?;
    Ok(p.apply(x, theta))
}

/// `−zᵀy + (δ/2) zᵀVz`.
pub fn mvo_cost(z: &DVector<f64>, y: &DVector<f64>, v: &DMatrix<f64>, delta: f64) -> Result<f64> {
    let n = z.len();
    check_len(y, n, "returns")?;
    check_square(v, n, "covariance")?;
    Ok(-z.dot(y) + 0.5 * delta * z.dot(&(v * z)))
}

/// `Σ̂ = (1/(m−1)) Σ rᵢ rᵢᵀ` with `rᵢ = yᵢ − P diag(xᵢ) θ`.
pub fn residual_covariance(
    panel: &ObservationPanel,
    p: &DesignMask,
    theta: &DVector<f64>,
) -> Result<ResidualCovariance> {
    let m = panel.len();
    if m < 2 {
        return Err(IpoError::InsufficientSample { needed: 2, got: m });
    }
    p.check_panel(panel)?;
    check_len(theta, p.d_x(), "theta")?;
    let d_z = panel.d_z();
    let mut s = DMatrix::zeros(d_z, d_z);
    for o in panel.iter() {
        let r = &o.y - p.apply(&o.x, theta);
        s.ger(1.0, &r, &r, 1.0);
    }
    s /= (m - 1) as f64;
    crate::linalg::symmetrize(&mut s);
    Ok(ResidualCovariance { sigma_hat: s })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn predict_examples() {
        let p = DesignMask::identity(2);
        assert_eq!(predict_returns(&v(&[1.0, 1.0]), &p, &v(&[0.1, 0.2])).unwrap(), v(&[0.1, 0.2]));
        assert_eq!(predict_returns(&v(&[0.0, 0.0]), &p, &v(&[3.0, -7.0])).unwrap(), v(&[0.0, 0.0]));
        let p = DesignMask::from_matrix(&DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 0.0, 0.0, 1.0])).unwrap();
        let x = v(&[1.0, 2.0, 3.0]);
        let theta = v(&[1.0, 1.0, 1.0]);
        // hand product: row 0 = 1*1 + 2*1, row 1 = 3*1
        assert_eq!(predict_returns(&x, &p, &theta).unwrap(), v(&[3.0, 3.0]));
        assert_eq!(p.design(&x) * &theta, v(&[3.0, 3.0]));
        assert!(predict_returns(&v(&[1.0]), &p, &theta).is_err());
    }

    #[test]
    fn mvo_cost_examples() {
        let i2 = DMatrix::identity(2, 2);
        assert_relative_eq!(mvo_cost(&v(&[1.0, 0.0]), &v(&[0.1, 0.5]), &i2, 2.0).unwrap(), 0.9, epsilon = 1e-15);
        assert_eq!(mvo_cost(&v(&[0.0, 0.0]), &v(&[0.3, -0.5]), &i2, 7.0).unwrap(), 0.0);
        let vv = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        // zᵀVz = 0.25 + 0.25 + 2·0.25·0.5 = 0.75
        let c = mvo_cost(&v(&[0.5, 0.5]), &v(&[0.1, 0.1]), &vv, 1.0).unwrap();
        assert_relative_eq!(c, -0.1 + 0.375, epsilon = 1e-15);
    }

    fn panel_from(rows: &[(Vec<f64>, Vec<f64>)]) -> ObservationPanel {
        let obs = rows
            .iter()
            .map(|(x, y)| Observation::new(v(x), v(y), DMatrix::identity(y.len(), y.len()), None).unwrap())
            .collect();
        ObservationPanel::new(obs).unwrap()
    }

    #[test]
    fn residual_covariance_examples() {
        let p = DesignMask::identity(2);
        let panel = panel_from(&[(vec![1.0, 1.0], vec![1.0, 0.0]), (vec![1.0, 1.0], vec![-1.0, 0.0])]);
        let s = residual_covariance(&panel, &p, &v(&[0.0, 0.0])).unwrap();
        assert_eq!(s.sigma_hat, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));

        let panel = panel_from(&[(vec![1.0, 2.0], vec![0.5, 1.0]), (vec![2.0, 1.0], vec![1.0, 0.5])]);
        let s = residual_covariance(&panel, &p, &v(&[0.5, 0.5])).unwrap();
        assert_eq!(s.sigma_hat, DMatrix::zeros(2, 2));

        let single = panel_from(&[(vec![1.0, 1.0], vec![1.0, 0.0])]);
        assert!(matches!(
            residual_covariance(&single, &p, &v(&[0.0, 0.0])),
            Err(IpoError::InsufficientSample { .. })
        ));
    }

    #[test]
    fn panel_validation() {
        assert!(Observation::new(v(&[1.0]), v(&[1.0, 2.0]), DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]), None)
            .is_err());
        assert!(matches!(
            Observation::new(v(&[1.0]), v(&[1.0, 2.0]), DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]), None),
            Err(IpoError::NotPositiveDefinite(_))
        ));
        let a = Observation::new(v(&[1.0]), v(&[1.0]), DMatrix::identity(1, 1), None).unwrap();
        let b = Observation::new(v(&[1.0, 2.0]), v(&[1.0]), DMatrix::identity(1, 1), None).unwrap();
        assert!(ObservationPanel::new(vec![a, b]).is_err());
        assert!(ObservationPanel::new(vec![]).is_err());
    }

    #[test]
    fn design_mask_validation() {
        assert!(DesignMask::from_matrix(&DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).is_err());
        assert!(DesignMask::from_matrix(&DMatrix::from_row_slice(1, 2, &[1.0, 0.5])).is_err());
        let p = DesignMask::block(2, 3);
        assert_eq!(p.index_set(1), &[3, 4, 5]);
        assert_eq!(DesignMask::from_matrix(&p.to_matrix()).unwrap(), p);
    }

    #[test]
    fn congruence_matches_dense_product() {
        let pm = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        let p = DesignMask::from_matrix(&pm).unwrap();
        let x = v(&[0.3, -1.2, 2.0]);
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let b = &pm * DMatrix::from_diagonal(&x);
        assert_relative_eq!(p.congruence(&x, &m), b.transpose() * &m * &b, epsilon = 1e-14);
        let q = DesignMask::block(2, 2);
        let x = v(&[0.3, -1.2, 2.0, 0.7]);
        let b = q.to_matrix() * DMatrix::from_diagonal(&x);
        assert_relative_eq!(q.congruence(&x, &m), b.transpose() * &m * &b, epsilon = 1e-14);
        let g = v(&[0.4, -0.1]);
        assert_relative_eq!(q.transpose_apply(&x, &g), b.transpose() * &g, epsilon = 1e-14);
    }

    #[test]
    fn region_constructors() {
        assert!(FeasibleRegion::unconstrained(2, 0.0).is_err());
        assert!(matches!(
            FeasibleRegion::equality(DMatrix::identity(2, 2), v(&[1.0, 1.0]), 1.0),
            Err(IpoError::DegenerateRegion(_))
        ));
        let inconsistent = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            FeasibleRegion::equality(inconsistent, v(&[1.0, 2.0]), 1.0),
            Err(IpoError::Infeasible(_))
        ));
        // sum to 1 with every weight at most 0.1 across 3 assets is empty
        assert!(matches!(FeasibleRegion::boxed(3, 0.1, Some(1.0), 1.0), Err(IpoError::Infeasible(_))));
        let r = FeasibleRegion::boxed(3, 0.5, Some(1.0), 2.0).unwrap();
        assert_eq!(r.kind(), RegionKind::Inequality);
        assert_eq!(r.without_inequalities().kind(), RegionKind::Equality);
    }

    proptest! {
        #[test]
        fn predict_is_linear_in_theta(
            x in prop::collection::vec(-3.0..3.0f64, 4),
            t1 in prop::collection::vec(-3.0..3.0f64, 4),
            t2 in prop::collection::vec(-3.0..3.0f64, 4),
            a in -2.0..2.0f64,
            b in -2.0..2.0f64,
        ) {
            let p = DesignMask::from_index_sets(vec![vec![0, 1], vec![2], vec![1, 3]], 4).unwrap();
            let (x, t1, t2) = (v(&x), v(&t1), v(&t2));
            let lhs = p.apply(&x, &(&t1 * a + &t2 * b));
            let rhs = p.apply(&x, &t1) * a + p.apply(&x, &t2) * b;
            prop_assert!((lhs - rhs).amax() <= 1e-12);
        }

        #[test]
        fn mvo_cost_is_convex(
            z1 in prop::collection::vec(-5.0..5.0f64, 3),
            z2 in prop::collection::vec(-5.0..5.0f64, 3),
            y in prop::collection::vec(-1.0..1.0f64, 3),
            l in prop::collection::vec(-1.0..1.0f64, 9),
            t in 0.0..1.0f64,
            delta in 0.1..10.0f64,
        ) {
            let l = DMatrix::from_row_slice(3, 3, &l);
            let vv = &l * l.transpose() + DMatrix::identity(3, 3) * 0.01;
            let (z1, z2, y) = (v(&z1), v(&z2), v(&y));
            let zt = &z1 * t + &z2 * (1.0 - t);
            let lhs = mvo_cost(&zt, &y, &vv, delta).unwrap();
            let rhs = t * mvo_cost(&z1, &y, &vv, delta).unwrap() + (1.0 - t) * mvo_cost(&z2, &y, &vv, delta).unwrap();
            prop_assert!(lhs <= rhs + 1e-10);
        }

        #[test]
        fn residual_covariance_is_symmetric_psd(
            data in prop::collection::vec(-2.0..2.0f64, 3 * 6),
            theta in prop::collection::vec(-1.0..1.0f64, 3),
        ) {
            let rows: Vec<_> = (0..3).map(|i| (data[6 * i..6 * i + 3].to_vec(), data[6 * i + 3..6 * i + 6].to_vec())).collect();
            let panel = panel_from(&rows);
            let s = residual_covariance(&panel, &DesignMask::identity(3), &v(&theta)).unwrap().sigma_hat;
            prop_assert!(s == s.transpose());
            prop_assert!(crate::linalg::min_eigenvalue(&s) >= -1e-10);
        }
    }
}
