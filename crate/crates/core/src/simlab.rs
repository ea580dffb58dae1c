//! Synthetic data generators and the three simulation studies.
//!
//! Returns follow `y = Σ_q P diag(x^q) θ_q + ε` with `ε ~ N(0, V)` and `V`
//! the Toeplitz matrix `σ²ρ^|j−k|`, so realized volatility is `σ` per asset.
//! The signal-to-noise ratio is met by scaling a standard-normal draw of
//! `θ` by `κ` rather than by inflating the noise.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::covariance::sample_covariance_rows;
use crate::error::{IpoError, Result};
use crate::estimators::{assemble, fit_ipo, fit_ols, solve_ipo, IpoCase, ThetaConstraints};
use crate::model::{DesignMask, FactoredCov, FeasibleRegion, Observation, ObservationPanel};
use crate::rng::{stream, sub_seed};
use crate::trainer::{loss_full, train, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSpec {
    pub d_z: usize,
    pub d_x_per_asset: usize,
    pub rho: f64,
    /// Daily volatility of each asset.
    pub sigma: f64,
    /// `f64::INFINITY` gives noiseless returns with unscaled θ.
    pub snr: f64,
    /// Covariance estimates use `res·d_z` fresh draws.
    pub res: usize,
    pub delta: f64,
    pub poly_degree: usize,
    pub gamma: Option<f64>,
    pub n_obs: usize,
    pub n_trials: usize,
    pub seed: u64,
    /// A new covariance estimate is drawn every this many observations.
    pub fresh_cov_every: usize,
}

impl Default for SimSpec {
    fn default() -> Self {
        SimSpec {
            d_z: 10,
            d_x_per_asset: 1,
            rho: 0.0,
            sigma: 0.0125,
            snr: 0.005,
            res: 10,
            delta: 1.0,
            poly_degree: 1,
            gamma: None,
            n_obs: 2000,
            n_trials: 100,
            seed: 0,
            fresh_cov_every: 1,
        }
    }
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(IpoError::InvalidConfig(m));
        if self.d_z == 0 || self.d_x_per_asset == 0 {
            return fail("d_z and d_x_per_asset must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.rho) {
            return fail(format!("rho must lie in [0, 1), got {}", self.rho));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return fail(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(self.snr > 0.0) {
            return fail(format!("snr must be positive, got {}", self.snr));
        }
        if self.res < 2 {
            return fail(format!("res must be at least 2 for a nonsingular estimate, got {}", self.res));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return fail(format!("delta must be positive, got {}", self.delta));
        }
        if self.poly_degree == 0 {
            return fail("poly_degree must be at least 1".into());
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0) {
                return fail(format!("gamma must be positive, got {g}"));
            }
        }
        if self.n_obs < 4 || self.n_trials == 0 || self.fresh_cov_every == 0 {
            return fail("n_obs must be at least 4; n_trials and fresh_cov_every at least 1".into());
        }
        Ok(())
    }

    pub fn d_x(&self) -> usize {
        self.d_z * self.d_x_per_asset
    }

    pub fn mask(&self) -> DesignMask {
        DesignMask::block(self.d_z, self.d_x_per_asset)
    }

    /// Same spec with the seed of trial `t` under `label`.
    pub fn for_trial(&self, label: &str, t: usize) -> SimSpec {
        SimSpec { seed: sub_seed(self.seed, &format!("{label}/trial/{t}")), ..self.clone() }
    }
}

/// `V[j,k] = σ²ρ^|j−k|`.
pub fn toeplitz_covariance(d_z: usize, sigma: f64, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(d_z, d_z, |j, k| sigma * sigma * rho.powi(j.abs_diff(k) as i32))
}

#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Standard-normal draw, stacked by degree: entry `(q−1)·d_x + k`.
    pub theta_unit: DVector<f64>,
    /// `κ·theta_unit`, the coefficients that generate returns.
    pub theta: DVector<f64>,
    pub scale: f64,
    pub v_true: Arc<FactoredCov>,
}

impl GroundTruth {
    /// Linear-term coefficients (the ones a linear model can recover).
    pub fn linear(&self, d_x: usize) -> DVector<f64> {
        self.theta.rows(0, d_x).into_owned()
    }
}

fn normal_moment(n: usize) -> f64 {
    if n % 2 == 1 {
        return 0.0;
    }
    (1..n).step_by(2).map(|k| k as f64).product()
}

/// Mean over assets of `Var(Σ_q Σ_{k∈a(j)} θ_qk x_k^q)` for `x ~ N(0, I)`.
pub fn signal_variance(spec: &SimSpec, theta: &DVector<f64>) -> f64 {
    let d_x = spec.d_x();
    let p = spec.poly_degree;
    let mut total = 0.0;
    for k in 0..d_x {
        for q in 1..=p {
            for r in 1..=p {
                let cov = normal_moment(q + r) - normal_moment(q) * normal_moment(r);
                total += theta[(q - 1) * d_x + k] * theta[(r - 1) * d_x + k] * cov;
            }
        }
    }
    total / spec.d_z as f64
}

pub fn generate_ground_truth(spec: &SimSpec) -> Result<GroundTruth> {
    spec.validate()?;
    let mut rng = stream(spec.seed, "truth");
    let n = spec.d_x() * spec.poly_degree;
    let theta_unit = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    let scale = if spec.snr.is_finite() {
        let sv = signal_variance(spec, &theta_unit);
        if sv <= 0.0 {
            return Err(IpoError::InvalidConfig("ground truth has zero signal variance".into()));
        }
        (spec.snr * spec.sigma * spec.sigma / sv).sqrt()
    } else {
        1.0
    };
    let v_true = FactoredCov::shared(toeplitz_covariance(spec.d_z, spec.sigma, spec.rho), "V_true")?;
    Ok(GroundTruth { theta: &theta_unit * scale, theta_unit, scale, v_true })
}

/// Noise-free expected return for features `x`.
pub fn signal(spec: &SimSpec, truth: &GroundTruth, x: &DVector<f64>) -> DVector<f64> {
    let d_x = spec.d_x();
    let k = spec.d_x_per_asset;
    DVector::from_fn(spec.d_z, |j, _| {
        let mut s = 0.0;
        for f in j * k..(j + 1) * k {
            let mut pow = 1.0;
            for q in 0..spec.poly_degree {
                pow *= x[f];
                s += truth.theta[q * d_x + f] * pow;
            }
        }
        s
    })
}

fn gaussian_rows<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// `n_obs` observations with fresh covariance estimates attached.
pub fn generate_panel(spec: &SimSpec, truth: &GroundTruth) -> Result<ObservationPanel> {
    spec.validate()?;
    let d_z = spec.d_z;
    let mut rx = stream(spec.seed, "panel/x");
    let mut re = stream(spec.seed, "panel/noise");
    let mut rc = stream(spec.seed, "panel/cov");
    let l = truth.v_true.chol().l();
    let noisy = spec.snr.is_finite();
    let s = spec.res * d_z;
    let mut v_hat: Option<Arc<FactoredCov>> = None;
    let mut obs = Vec::with_capacity(spec.n_obs);
    for i in 0..spec.n_obs {
        let x = DVector::from_fn(spec.d_x(), |_, _| StandardNormal.sample(&mut rx));
        let mut y = signal(spec, truth, &x);
        if noisy {
            let e = DVector::from_fn(d_z, |_, _| StandardNormal.sample(&mut re));
            y += &l * e;
        }
        if i % spec.fresh_cov_every == 0 {
            let draws = gaussian_rows(&mut rc, s, d_z) * l.transpose();
            v_hat = Some(FactoredCov::shared(sample_covariance_rows(&draws)?, "V_hat")?);
        }
        obs.push(Observation::from_shared(x, y, v_hat.clone().expect("set at i = 0"), Some(truth.v_true.clone()))?);
    }
    ObservationPanel::new(obs)
}

/// Proportion of variance explained by `P diag(x)θ`, averaged over assets.
pub fn pve(panel: &ObservationPanel, p: &DesignMask, theta: &DVector<f64>) -> Result<f64> {
    p.check_panel(panel)?;
    let m = panel.len();
    if m < 2 {
        return Err(IpoError::InsufficientSample { needed: 2, got: m });
    }
    let d_z = panel.d_z();
    let mut mean = DVector::zeros(d_z);
    for o in panel.iter() {
        mean += &o.y;
    }
    mean /= m as f64;
    let mut sse = DVector::<f64>::zeros(d_z);
    let mut sst = DVector::<f64>::zeros(d_z);
    let mut ssq = DVector::<f64>::zeros(d_z);
    for o in panel.iter() {
        let r = &o.y - p.apply(&o.x, theta);
        let c = &o.y - &mean;
        sse += r.component_mul(&r);
        sst += c.component_mul(&c);
        ssq += o.y.component_mul(&o.y);
    }
    let mut total = 0.0;
    for j in 0..d_z {
        // constant series leave only rounding in sst
        if sst[j] <= 1e-20 * ssq[j] || sst[j] == 0.0 {
            return Err(IpoError::DegenerateMetric(format!("asset {j} has zero return variance")));
        }
        total += 1.0 - sse[j] / sst[j];
    }
    Ok(total / d_z as f64)
}

/// Linear-interpolated quantile of `values` (type 7).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n − 1).
pub fn std_dev(values: &[f64]) -> f64 {
    let mu = mean(values);
    (values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (values.len() as f64 - 1.0)).sqrt()
}

/// One-sided paired t-test of `mean(a − b) < 0`.
pub fn paired_t_test_less(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len();
    if n < 2 {
        return f64::NAN;
    }
    let sd = std_dev(&d);
    let mu = mean(&d);
    if sd == 0.0 {
        return if mu < 0.0 { 0.0 } else { 1.0 };
    }
    let t = mu / (sd / (n as f64).sqrt());
    StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("valid dof").cdf(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimConstraint {
    Unconstrained,
    /// Fully invested: `1ᵀz = 1`.
    Equality,
}

impl SimConstraint {
    pub fn region(self, d_z: usize, delta: f64) -> Result<FeasibleRegion> {
        match self {
            SimConstraint::Unconstrained => FeasibleRegion::unconstrained(d_z, delta),
            SimConstraint::Equality => FeasibleRegion::budget(d_z, 1.0, delta),
        }
    }
}

fn write_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn split(panel: &ObservationPanel) -> Result<(ObservationPanel, ObservationPanel)> {
    let half = panel.len() / 2;
    Ok((panel.range(0..half)?, panel.range(half..panel.len())?))
}

// ---------------------------------------------------------------- Sim 1

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sim1Config {
    pub spec: SimSpec,
    pub rhos: Vec<f64>,
    pub snrs: Vec<f64>,
    pub resolutions: Vec<usize>,
    pub constraint: SimConstraint,
}

impl Default for Sim1Config {
    fn default() -> Self {
        Sim1Config {
            spec: SimSpec::default(),
            rhos: vec![0.0, 0.25, 0.5, 0.75],
            snrs: vec![0.001, 0.002, 0.003, 0.004, 0.005, 0.01, 0.05, 0.10],
            resolutions: vec![5, 10, 20],
            constraint: SimConstraint::Equality,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sim1Cell {
    pub rho: f64,
    pub snr: f64,
    pub res: usize,
    pub ols_cost: Vec<f64>,
    pub ipo_cost: Vec<f64>,
    pub ols_pve: Vec<f64>,
    pub ipo_pve: Vec<f64>,
}

impl Sim1Cell {
    /// One-sided paired t-test p-value for IPO cost < OLS cost.
    pub fn p_value(&self) -> f64 {
        paired_t_test_less(&self.ipo_cost, &self.ols_cost)
    }

    /// `(mean OLS − mean IPO) / |mean OLS|`.
    pub fn rel_gap(&self) -> f64 {
        let o = mean(&self.ols_cost);
        (o - mean(&self.ipo_cost)) / o.abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sim1Row {
    pub rho: f64,
    pub snr: f64,
    pub res: usize,
    pub method: String,
    pub n_trials: usize,
    pub cost_mean: f64,
    pub cost_lo: f64,
    pub cost_hi: f64,
    pub pve_mean: f64,
    pub pve_lo: f64,
    pub pve_hi: f64,
    pub p_value: f64,
    pub rel_gap: f64,
}

#[derive(Debug, Clone)]
pub struct Sim1Table {
    pub cells: Vec<Sim1Cell>,
}

impl Sim1Table {
    pub fn rows(&self) -> Vec<Sim1Row> {
        let mut rows = Vec::new();
        for c in &self.cells {
            for (method, cost, pv) in [("OLS", &c.ols_cost, &c.ols_pve), ("IPO", &c.ipo_cost, &c.ipo_pve)] {
                rows.push(Sim1Row {
                    rho: c.rho,
                    snr: c.snr,
                    res: c.res,
                    method: method.into(),
                    n_trials: cost.len(),
                    cost_mean: mean(cost),
                    cost_lo: quantile(cost, 0.025),
                    cost_hi: quantile(cost, 0.975),
                    pve_mean: mean(pv),
                    pve_lo: quantile(pv, 0.025),
                    pve_hi: quantile(pv, 0.975),
                    p_value: c.p_value(),
                    rel_gap: c.rel_gap(),
                });
            }
        }
        rows
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(&self.rows(), path)
    }
}

struct Sim1Trial {
    ols: (f64, f64),
    ipo: (f64, f64),
}

fn sim1_trial(spec: &SimSpec, constraint: SimConstraint) -> Result<Sim1Trial> {
    let truth = generate_ground_truth(spec)?;
    let panel = generate_panel(spec, &truth)?;
    let (train, test) = split(&panel)?;
    let p = spec.mask();
    let region = constraint.region(spec.d_z, spec.delta)?;
    let ols = fit_ols(&train, &p)?.theta;
    let q = assemble(&train, &p, spec.delta, IpoCase::from_region(&region)?)?;
    let ipo = solve_ipo(&q, &ThetaConstraints::none())?.theta;
    let eval = |theta: &DVector<f64>| -> Result<(f64, f64)> { Ok((loss_full(&test, &p, &region, theta)?, pve(&test, &p, theta)?)) };
    Ok(Sim1Trial { ols: eval(&ols)?, ipo: eval(&ipo)? })
}

/// Out-of-sample MVO cost and PVE of OLS and IPO over a (ρ, SNR, res) grid.
/// Trial `t` uses the same seed in every cell.
pub fn run_sim1(cfg: &Sim1Config) -> Result<Sim1Table> {
    cfg.spec.validate()?;
    let mut cells = Vec::new();
    for &rho in &cfg.rhos {
        for &snr in &cfg.snrs {
            for &res in &cfg.resolutions {
                let base = SimSpec { rho, snr, res, ..cfg.spec.clone() };
                base.validate()?;
                let trials = (0..base.n_trials)
                    .into_par_iter()
                    .map(|t| sim1_trial(&base.for_trial("sim1", t), cfg.constraint))
                    .collect::<Result<Vec<_>>>()?;
                log::info!("sim1 rho={rho} snr={snr} res={res}: {} trials", trials.len());
                cells.push(Sim1Cell {
                    rho,
                    snr,
                    res,
                    ols_cost: trials.iter().map(|t| t.ols.0).collect(),
                    ipo_cost: trials.iter().map(|t| t.ipo.0).collect(),
                    ols_pve: trials.iter().map(|t| t.ols.1).collect(),
                    ipo_pve: trials.iter().map(|t| t.ipo.1).collect(),
                });
            }
        }
    }
    Ok(Sim1Table { cells })
}

// ---------------------------------------------------------------- Sim 2

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sim2Config {
    pub spec: SimSpec,
    pub sizes: Vec<usize>,
    pub constraint: SimConstraint,
    pub trainer: TrainConfig,
}

impl Default for Sim2Config {
    fn default() -> Self {
        Sim2Config {
            spec: SimSpec { d_x_per_asset: 3, ..SimSpec::default() },
            sizes: vec![25, 50, 100, 250],
            constraint: SimConstraint::Unconstrained,
            trainer: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Sim2Trial {
    pub ols_seconds: f64,
    pub ipo_seconds: f64,
    pub grad_seconds: f64,
    pub grad_iterations: usize,
    pub grad_converged: bool,
    /// `max |θ_GRAD − θ_IPO|`.
    pub theta_gap: f64,
}

#[derive(Debug, Clone)]
pub struct Sim2Cell {
    pub d_z: usize,
    pub trials: Vec<Sim2Trial>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sim2Row {
    pub d_z: usize,
    pub method: String,
    pub n_trials: usize,
    pub seconds_mean: f64,
    pub seconds_lo: f64,
    pub seconds_hi: f64,
    pub iterations_mean: Option<f64>,
    pub iterations_lo: Option<f64>,
    pub iterations_hi: Option<f64>,
    pub theta_gap_max: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Sim2Table {
    pub cells: Vec<Sim2Cell>,
}

impl Sim2Cell {
    pub fn mean_seconds(&self) -> (f64, f64, f64) {
        let col = |f: fn(&Sim2Trial) -> f64| mean(&self.trials.iter().map(f).collect::<Vec<_>>());
        (col(|t| t.ols_seconds), col(|t| t.ipo_seconds), col(|t| t.grad_seconds))
    }
}

impl Sim2Table {
    pub fn rows(&self) -> Vec<Sim2Row> {
        let mut rows = Vec::new();
        for c in &self.cells {
            let n = c.trials.len();
            let its: Vec<f64> = c.trials.iter().map(|t| t.grad_iterations as f64).collect();
            let gap = c.trials.iter().map(|t| t.theta_gap).fold(0.0, f64::max);
            let cols: [(&str, fn(&Sim2Trial) -> f64); 3] =
                [("OLS", |t| t.ols_seconds), ("IPO", |t| t.ipo_seconds), ("IPO-GRAD", |t| t.grad_seconds)];
            for (method, f) in cols {
                let secs: Vec<f64> = c.trials.iter().map(f).collect();
                let grad = method == "IPO-GRAD";
                rows.push(Sim2Row {
                    d_z: c.d_z,
                    method: method.into(),
                    n_trials: n,
                    seconds_mean: mean(&secs),
                    seconds_lo: quantile(&secs, 0.025),
                    seconds_hi: quantile(&secs, 0.975),
                    iterations_mean: grad.then(|| mean(&its)),
                    iterations_lo: grad.then(|| quantile(&its, 0.025)),
                    iterations_hi: grad.then(|| quantile(&its, 0.975)),
                    theta_gap_max: grad.then_some(gap),
                });
            }
        }
        rows
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(&self.rows(), path)
    }
}

fn sim2_trial(spec: &SimSpec, constraint: SimConstraint, trainer: &TrainConfig) -> Result<Sim2Trial> {
    let truth = generate_ground_truth(spec)?;
    let panel = generate_panel(spec, &truth)?;
    let (train_set, _) = split(&panel)?;
    let p = spec.mask();
    let region = constraint.region(spec.d_z, spec.delta)?;

    let t0 = Instant::now();
    fit_ols(&train_set, &p)?;
    let ols_seconds = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let q = assemble(&train_set, &p, spec.delta, IpoCase::from_region(&region)?)?;
    let ipo = solve_ipo(&q, &ThetaConstraints::none())?;
    let ipo_seconds = t0.elapsed().as_secs_f64();

    let cfg = TrainConfig { seed: sub_seed(spec.seed, "trainer"), init_scale: trainer.init_scale * truth.scale, ..*trainer };
    let t0 = Instant::now();
    let grad = train(&train_set, &p, &region, &cfg)?;
    let grad_seconds = t0.elapsed().as_secs_f64();
    Ok(Sim2Trial {
        ols_seconds,
        ipo_seconds,
        grad_seconds,
        grad_iterations: grad.iterations,
        grad_converged: grad.converged,
        theta_gap: (grad.coefficients.theta - ipo.theta).amax(),
    })
}

/// Wall-clock fitting time of OLS, analytic IPO and IPO-GRAD by universe size.
/// Trials run sequentially so timings are not contended.
pub fn run_sim2(cfg: &Sim2Config) -> Result<Sim2Table> {
    cfg.spec.validate()?;
    cfg.trainer.validate()?;
    let mut cells = Vec::new();
    for &d_z in &cfg.sizes {
        let base = SimSpec { d_z, ..cfg.spec.clone() };
        base.validate()?;
        let trials = (0..base.n_trials)
            .map(|t| sim2_trial(&base.for_trial("sim2", t), cfg.constraint, &cfg.trainer))
            .collect::<Result<Vec<_>>>()?;
        log::info!("sim2 d_z={d_z}: {} trials", trials.len());
        cells.push(Sim2Cell { d_z, trials });
    }
    Ok(Sim2Table { cells })
}

// ---------------------------------------------------------------- Sim 3

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sim3Config {
    pub spec: SimSpec,
    pub gammas: Vec<f64>,
    pub deltas: Vec<f64>,
    pub degrees: Vec<usize>,
    pub trainer: TrainConfig,
    /// IPO-GRAD step size in units of 1/λmax of the relaxed IPO Hessian.
    pub step_scale: f64,
}

impl Default for Sim3Config {
    fn default() -> Self {
        Sim3Config {
            spec: SimSpec { d_x_per_asset: 3, n_trials: 30, ..SimSpec::default() },
            gammas: vec![0.05, 0.10, 0.25, 0.50, 0.75, 1.0, 2.0, 5.0, 10.0],
            deltas: vec![1.0, 5.0, 10.0, 25.0],
            degrees: vec![1, 2, 4],
            // the boxed loss is piecewise smooth and rarely reaches grad_tol
            trainer: TrainConfig { max_iters: 300, ..TrainConfig::default() },
            step_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Sim3Method {
    pub oos_cost: f64,
    pub in_sample_cost: f64,
    pub seconds: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct Sim3Cell {
    pub gamma: f64,
    pub delta: f64,
    pub degree: usize,
    pub heuristic: Vec<Sim3Method>,
    pub grad: Vec<Sim3Method>,
}

impl Sim3Cell {
    pub fn oos(&self, grad: bool) -> Vec<f64> {
        let src = if grad { &self.grad } else { &self.heuristic };
        src.iter().map(|m| m.oos_cost).collect()
    }

    pub fn in_sample(&self, grad: bool) -> Vec<f64> {
        let src = if grad { &self.grad } else { &self.heuristic };
        src.iter().map(|m| m.in_sample_cost).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sim3Row {
    pub gamma: f64,
    pub delta: f64,
    pub degree: usize,
    pub method: String,
    pub n_trials: usize,
    pub cost_mean: f64,
    pub cost_lo: f64,
    pub cost_hi: f64,
    pub cost_se: f64,
    pub in_sample_mean: f64,
    pub seconds_mean: f64,
    pub iterations_mean: f64,
    pub converged_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct Sim3Table {
    pub cells: Vec<Sim3Cell>,
}

impl Sim3Table {
    pub fn rows(&self) -> Vec<Sim3Row> {
        let mut rows = Vec::new();
        for c in &self.cells {
            for (method, src) in [("IPO", &c.heuristic), ("IPO-GRAD", &c.grad)] {
                let oos: Vec<f64> = src.iter().map(|m| m.oos_cost).collect();
                let n = oos.len();
                rows.push(Sim3Row {
                    gamma: c.gamma,
                    delta: c.delta,
                    degree: c.degree,
                    method: method.into(),
                    n_trials: n,
                    cost_mean: mean(&oos),
                    cost_lo: quantile(&oos, 0.025),
                    cost_hi: quantile(&oos, 0.975),
                    cost_se: if n > 1 { std_dev(&oos) / (n as f64).sqrt() } else { f64::NAN },
                    in_sample_mean: mean(&src.iter().map(|m| m.in_sample_cost).collect::<Vec<_>>()),
                    seconds_mean: mean(&src.iter().map(|m| m.seconds).collect::<Vec<_>>()),
                    iterations_mean: mean(&src.iter().map(|m| m.iterations as f64).collect::<Vec<_>>()),
                    converged_fraction: src.iter().filter(|m| m.converged).count() as f64 / n as f64,
                });
            }
        }
        rows
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(&self.rows(), path)
    }
}

fn sim3_trial(spec: &SimSpec, gamma: f64, trainer: &TrainConfig, step_scale: f64) -> Result<(Sim3Method, Sim3Method)> {
    let truth = generate_ground_truth(spec)?;
    let panel = generate_panel(spec, &truth)?;
    let (train_set, test) = split(&panel)?;
    let p = spec.mask();
    let region = FeasibleRegion::boxed(spec.d_z, gamma, None, spec.delta)?;

    let t0 = Instant::now();
    let relaxed = region.without_inequalities();
    let q = assemble(&train_set, &p, spec.delta, IpoCase::from_region(&relaxed)?)?;
    let heur = solve_ipo(&q, &ThetaConstraints::none())?.theta;
    let heur_seconds = t0.elapsed().as_secs_f64();

    // curvature of the relaxed loss; the box only flattens it
    let l_max = crate::linalg::sym_eigenvalues(&q.h).into_iter().fold(0.0, f64::max);
    let cfg = TrainConfig {
        seed: sub_seed(spec.seed, "trainer"),
        init_scale: trainer.init_scale * truth.scale,
        step_size: step_scale / l_max,
        ..*trainer
    };
    let t0 = Instant::now();
    let grad = train(&train_set, &p, &region, &cfg)?;
    let grad_seconds = t0.elapsed().as_secs_f64();

    let heuristic = Sim3Method {
        oos_cost: loss_full(&test, &p, &region, &heur)?,
        in_sample_cost: loss_full(&train_set, &p, &region, &heur)?,
        seconds: heur_seconds,
        iterations: 0,
        converged: true,
    };
    let grad = Sim3Method {
        oos_cost: loss_full(&test, &p, &region, &grad.coefficients.theta)?,
        in_sample_cost: grad.loss,
        seconds: grad_seconds,
        iterations: grad.iterations,
        converged: grad.converged,
    };
    Ok((heuristic, grad))
}

/// Box-constrained comparison of the analytic heuristic (fitted without the
/// box) against IPO-GRAD (fitted through it); both are evaluated with the box.
pub fn run_sim3(cfg: &Sim3Config) -> Result<Sim3Table> {
    cfg.spec.validate()?;
    cfg.trainer.validate()?;
    let mut cells = Vec::new();
    for &degree in &cfg.degrees {
        for &delta in &cfg.deltas {
            for &gamma in &cfg.gammas {
                let base = SimSpec { delta, poly_degree: degree, gamma: Some(gamma), ..cfg.spec.clone() };
                base.validate()?;
                let trials = (0..base.n_trials)
                    .into_par_iter()
                    .map(|t| sim3_trial(&base.for_trial("sim3", t), gamma, &cfg.trainer, cfg.step_scale))
                    .collect::<Result<Vec<_>>>()?;
                log::info!("sim3 p={degree} delta={delta} gamma={gamma}: {} trials", trials.len());
                let (heuristic, grad) = trials.into_iter().unzip();
                cells.push(Sim3Cell { gamma, delta, degree, heuristic, grad });
            }
        }
    }
    Ok(Sim3Table { cells })
}

/// OLS and IPO fitted on the in-sample half; handy for quick checks.
pub fn fit_pair(spec: &SimSpec, region: &FeasibleRegion) -> Result<(DVector<f64>, DVector<f64>)> {
    let truth = generate_ground_truth(spec)?;
    let panel = generate_panel(spec, &truth)?;
    let (train_set, _) = split(&panel)?;
    let p = spec.mask();
    Ok((fit_ols(&train_set, &p)?.theta, fit_ipo(&train_set, &p, region, &ThetaConstraints::none())?.theta))
}
