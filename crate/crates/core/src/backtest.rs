//! Walk-forward evaluation on daily return and feature panels, with
//! performance metrics and the bootstrap dominance ratio.
//!
//! Timing: features and the EWMA covariance are known at the close of day
//! `i`, the portfolio chosen then is executed at the close of day
//! `i + lag` and earns the return recorded on day `i + lag + 1`.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use chrono::{Datelike, Months, NaiveDate, Weekday};
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{ewma_covariance, EwmaConfig};
use crate::error::{IpoError, Result};
use crate::estimators::{fit_ipo, fit_ols, ThetaConstraints};
use crate::io::MarketData;
use crate::model::{Coefficients, DesignMask, FactoredCov, FeasibleRegion, Observation, ObservationPanel};
use crate::rng::stream;
use crate::simlab::quantile;
use crate::solver::{solve_region, IpmConfig};
use crate::trainer::{train, TrainConfig};

pub const TRADING_DAYS: f64 = 252.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionChoice {
    Unconstrained,
    Equality,
    Box,
}

/// Portfolio constraints: `1ᵀz = budget` for `equality`, and additionally
/// `−γ ≤ z ≤ γ` for `box` (where the budget is optional).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    pub kind: RegionChoice,
    #[serde(default)]
    pub budget: Option<f64>,
    #[serde(default)]
    pub gamma: Option<f64>,
}

impl Default for RegionConfig {
    fn default() -> Self {
        RegionConfig { kind: RegionChoice::Unconstrained, budget: None, gamma: None }
    }
}

impl RegionConfig {
    pub fn build(&self, d_z: usize, delta: f64) -> Result<FeasibleRegion> {
        let bad = |msg: &str| Err(IpoError::InvalidConfig(format!("region: {msg}")));
        match self.kind {
            RegionChoice::Unconstrained => {
                if self.budget.is_some() || self.gamma.is_some() {
                    return bad("an unconstrained region takes neither budget nor gamma");
                }
                FeasibleRegion::unconstrained(d_z, delta)
            }
            RegionChoice::Equality => {
                if self.gamma.is_some() {
                    return bad("gamma requires kind = \"box\"");
                }
                match self.budget {
                    Some(b) => FeasibleRegion::budget(d_z, b, delta),
                    None => bad("kind = \"equality\" requires budget"),
                }
            }
            RegionChoice::Box => match self.gamma {
                Some(g) => FeasibleRegion::boxed(d_z, g, self.budget, delta),
                None => bad("kind = \"box\" requires gamma"),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Estimator {
    #[serde(rename = "OLS")]
    Ols,
    #[serde(rename = "IPO")]
    Ipo,
    #[serde(rename = "IPO-GRAD")]
    IpoGrad,
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::Ols => "OLS",
            Estimator::Ipo => "IPO",
            Estimator::IpoGrad => "IPO-GRAD",
        })
    }
}

impl std::str::FromStr for Estimator {
    type Err = IpoError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "OLS" => Ok(Estimator::Ols),
            "IPO" => Ok(Estimator::Ipo),
            "IPO-GRAD" | "IPO_GRAD" => Ok(Estimator::IpoGrad),
            _ => Err(IpoError::InvalidConfig(format!("unknown estimator {s:?} (expected OLS, IPO or IPO-GRAD)"))),
        }
    }
}

/// Fits `est` on `panel`. IPO drops inequality rows and solves the remaining
/// program in closed form; IPO-GRAD trains through the full region.
pub fn fit_estimator(
    est: Estimator,
    panel: &ObservationPanel,
    p: &DesignMask,
    region: &FeasibleRegion,
    trainer: &TrainConfig,
) -> Result<Coefficients> {
    match est {
        Estimator::Ols => fit_ols(panel, p),
        Estimator::Ipo => fit_ipo(panel, p, region, &ThetaConstraints::none()),
        Estimator::IpoGrad => Ok(train(panel, p, region, trainer)?.coefficients),
    }
}

fn default_ewma() -> EwmaConfig {
    EwmaConfig { decay: 0.94, burn_in: 63 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BacktestConfig {
    pub train_start: NaiveDate,
    pub oos_start: NaiveDate,
    pub oos_end: NaiveDate,
    #[serde(default = "default_refit")]
    pub refit_months: u32,
    #[serde(default = "default_ewma")]
    pub ewma: EwmaConfig,
    #[serde(default)]
    pub region: RegionConfig,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<Estimator>,
    #[serde(default = "default_lag")]
    pub execution_lag: usize,
    #[serde(default)]
    pub trainer: TrainConfig,
    #[serde(default)]
    pub ipm: IpmConfig,
    #[serde(default = "default_samples")]
    pub bootstrap_samples: usize,
    #[serde(default = "default_block")]
    pub bootstrap_block: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_refit() -> u32 {
    24
}
fn default_delta() -> f64 {
    50.0
}
fn default_estimators() -> Vec<Estimator> {
    vec![Estimator::Ols, Estimator::Ipo]
}
fn default_lag() -> usize {
    1
}
fn default_samples() -> usize {
    1000
}
fn default_block() -> usize {
    252
}

impl BacktestConfig {
    pub fn new(train_start: NaiveDate, oos_start: NaiveDate, oos_end: NaiveDate) -> Self {
        BacktestConfig {
            train_start,
            oos_start,
            oos_end,
            refit_months: default_refit(),
            ewma: default_ewma(),
            region: RegionConfig::default(),
            delta: default_delta(),
            estimators: default_estimators(),
            execution_lag: default_lag(),
            trainer: TrainConfig::default(),
            ipm: IpmConfig::default(),
            bootstrap_samples: default_samples(),
            bootstrap_block: default_block(),
            seed: 0,
        }
    }

    pub fn validate(&self, d_z: usize) -> Result<()> {
        let bad = |msg: String| Err(IpoError::InvalidConfig(msg));
        if !(self.train_start < self.oos_start && self.oos_start < self.oos_end) {
            return bad(format!(
                "dates must satisfy train_start < oos_start < oos_end, got {} / {} / {}",
                self.train_start, self.oos_start, self.oos_end
            ));
        }
        if self.refit_months == 0 {
            return bad("refit_months must be positive".into());
        }
        if self.execution_lag < 1 {
            return bad("execution_lag must be at least 1".into());
        }
        if self.estimators.is_empty() {
            return bad("at least one estimator is required".into());
        }
        for (k, e) in self.estimators.iter().enumerate() {
            if self.estimators[..k].contains(e) {
                return bad(format!("estimator {e} listed twice"));
            }
        }
        if self.bootstrap_samples == 0 || self.bootstrap_block < 2 {
            return bad("bootstrap_samples must be positive and bootstrap_block at least 2".into());
        }
        self.ewma.validate(d_z)?;
        self.trainer.validate()?;
        self.region.build(d_z, self.delta).map(|_| ())
    }

    /// Refit dates: `oos_start` plus multiples of `refit_months` up to `oos_end`.
    pub fn fold_starts(&self) -> Vec<NaiveDate> {
        let mut out = Vec::new();
        for k in 0u32.. {
            let d = match self.oos_start.checked_add_months(Months::new(k * self.refit_months)) {
                Some(d) if d <= self.oos_end => d,
                _ => break,
            };
            out.push(d);
        }
        out
    }
}

/// EWMA covariance for every date (`None` during burn-in), factored once.
pub fn ewma_factors(data: &MarketData, cfg: &EwmaConfig) -> Result<Vec<Option<Arc<FactoredCov>>>> {
    ewma_covariance(&data.returns, cfg)?
        .into_iter()
        .zip(&data.dates)
        .map(|(v, d)| v.map(|m| FactoredCov::shared(m, &format!("EWMA covariance on {d}"))).transpose())
        .collect()
}

/// Per-day portfolios of one estimator.
#[derive(Debug, Clone)]
pub struct Decisions {
    pub estimator: Estimator,
    /// Row index into the data of each decision day.
    pub indices: Vec<usize>,
    pub dates: Vec<NaiveDate>,
    pub fold: Vec<usize>,
    pub weights: Vec<DVector<f64>>,
    pub fold_starts: Vec<NaiveDate>,
    /// Coefficients of each fold that has at least one decision day.
    pub coefficients: Vec<Option<Coefficients>>,
    pub training_sizes: Vec<usize>,
}

/// Training observations for a fold whose first day has row index `start`:
/// every day from `train_start` whose realized return is dated before `start`.
/// Both covariance slots hold the EWMA estimate.
pub fn training_panel(
    data: &MarketData,
    covs: &[Option<Arc<FactoredCov>>],
    cfg: &BacktestConfig,
    start: usize,
) -> Result<ObservationPanel> {
    let h = cfg.execution_lag + 1;
    let first = data.dates.partition_point(|d| *d < cfg.train_start);
    let obs = (first..start.saturating_sub(h))
        .filter_map(|i| covs[i].as_ref().map(|c| (i, c)))
        .map(|(i, c)| {
            Observation::from_shared(data.features[i].clone(), data.returns[i + h].clone(), c.clone(), Some(c.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    if obs.is_empty() {
        return Err(IpoError::InsufficientSample { needed: 1, got: 0 });
    }
    ObservationPanel::new(obs)
}

/// Walk-forward decisions for every out-of-sample day present in `data`.
/// Decisions never read data dated after the decision day, so truncating
/// `data` leaves earlier decisions unchanged.
pub fn decide(data: &MarketData, cfg: &BacktestConfig, est: Estimator) -> Result<Decisions> {
    let d_z = data.assets.len();
    cfg.validate(d_z)?;
    let region = cfg.region.build(d_z, cfg.delta)?;
    let covs = ewma_factors(data, &cfg.ewma)?;
    let starts = cfg.fold_starts();
    let mut out = Decisions {
        estimator: est,
        indices: Vec::new(),
        dates: Vec::new(),
        fold: Vec::new(),
        weights: Vec::new(),
        fold_starts: starts.clone(),
        coefficients: vec![None; starts.len()],
        training_sizes: vec![0; starts.len()],
    };
    for (k, &fs) in starts.iter().enumerate() {
        let lo = data.dates.partition_point(|d| *d < fs);
        let cap = data.dates.partition_point(|d| *d <= cfg.oos_end);
        let hi = match starts.get(k + 1) {
            Some(e) => data.dates.partition_point(|d| d < e).min(cap),
            None => cap,
        };
        if lo >= hi {
            continue;
        }
        let at = |i: usize, e: IpoError| IpoError::Backtest { date: data.dates[i].to_string(), source: Box::new(e) };
        let panel = training_panel(data, &covs, cfg, lo).map_err(|e| at(lo, e))?;
        let coef = fit_estimator(est, &panel, &data.mask, &region, &cfg.trainer).map_err(|e| at(lo, e))?;
        log::info!("{est}: fold {k} from {fs} fitted on {} observations", panel.len());
        for i in lo..hi {
            let cov = covs[i].as_ref().ok_or_else(|| {
                at(i, IpoError::InvalidConfig("no EWMA covariance yet (burn_in reaches past this day)".into()))
            })?;
            let y_hat = data.mask.apply(&data.features[i], &coef.theta);
            let z = solve_region(&y_hat, cov.matrix(), &region, &cfg.ipm).map_err(|e| at(i, e))?;
            out.indices.push(i);
            out.dates.push(data.dates[i]);
            out.fold.push(k);
            out.weights.push(z);
        }
        out.training_sizes[k] = panel.len();
        out.coefficients[k] = Some(coef);
    }
    if out.indices.is_empty() {
        return Err(IpoError::Ingestion(format!(
            "no trading days between {} and {} in the data",
            cfg.oos_start, cfg.oos_end
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceReport {
    pub annual_return: f64,
    /// `None` when the daily returns have zero variance.
    pub sharpe: Option<f64>,
    pub sharpe_degenerate: bool,
    pub volatility: f64,
    pub avg_drawdown: f64,
    pub value_at_risk: f64,
    pub mvo_cost: f64,
    pub sr_cost: Option<f64>,
    pub delta: f64,
    #[serde(skip)]
    pub daily_returns: Vec<f64>,
}

/// Daily mean and population variance. A spread below rounding noise of the
/// mean counts as zero variance.
pub fn daily_moments(r: &[f64]) -> (f64, f64) {
    let n = r.len() as f64;
    let mu = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    if var.sqrt() <= 1e-12 * mu.abs() {
        (mu, 0.0)
    } else {
        (mu, var)
    }
}

/// Annualized `−μ + δ/2 σ²`.
pub fn mvo_cost_of(r: &[f64], delta: f64) -> f64 {
    let (mu, var) = daily_moments(r);
    -TRADING_DAYS * mu + 0.5 * delta * TRADING_DAYS * var
}

/// Annualized `−μ/σ`, or `None` at zero variance.
pub fn sr_cost_of(r: &[f64]) -> Option<f64> {
    let (mu, var) = daily_moments(r);
    (var > 0.0).then(|| -TRADING_DAYS.sqrt() * mu / var.sqrt())
}

/// Mean of `W/peak − 1` over the compounded wealth path starting at 1.
pub fn average_drawdown(r: &[f64]) -> f64 {
    let mut w = 1.0f64;
    let mut peak = 1.0f64;
    let mut total = 0.0;
    for v in r {
        w *= 1.0 + v;
        peak = peak.max(w);
        total += w / peak - 1.0;
    }
    total / r.len() as f64
}

pub fn metrics(daily_returns: &[f64], delta: f64) -> Result<PerformanceReport> {
    if daily_returns.len() < 2 {
        return Err(IpoError::InsufficientSample { needed: 2, got: daily_returns.len() });
    }
    if daily_returns.iter().any(|v| !v.is_finite()) {
        return Err(IpoError::DegenerateMetric("non-finite daily return".into()));
    }
    let (mu, var) = daily_moments(daily_returns);
    let sr_cost = sr_cost_of(daily_returns);
    Ok(PerformanceReport {
        annual_return: TRADING_DAYS * mu,
        sharpe: sr_cost.map(|c| -c),
        sharpe_degenerate: sr_cost.is_none(),
        volatility: (TRADING_DAYS * var).sqrt(),
        avg_drawdown: average_drawdown(daily_returns),
        value_at_risk: quantile(daily_returns, 0.05),
        mvo_cost: mvo_cost_of(daily_returns, delta),
        sr_cost,
        delta,
        daily_returns: daily_returns.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostKind {
    Mvo,
    Sr,
}

/// Fraction of bootstrap samples in which `a` has a strictly lower realized
/// cost than `b`. Each sample is `block` distinct days drawn without
/// replacement, shared by both series. Samples where the Sharpe cost is
/// undefined count as no dominance.
pub fn bootstrap_dominance(
    a: &[f64],
    b: &[f64],
    delta: f64,
    n_samples: usize,
    block: usize,
    seed: u64,
    kind: CostKind,
) -> Result<f64> {
    if a.len() != b.len() {
        return Err(IpoError::dim(format!("return series of length {} and {}", a.len(), b.len())));
    }
    if a.len() < block {
        return Err(IpoError::InsufficientSample { needed: block, got: a.len() });
    }
    if n_samples == 0 {
        return Err(IpoError::InvalidConfig("n_samples must be positive".into()));
    }
    let wins: usize = (0..n_samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(seed, &format!("bootstrap/{k}"));
            let idx = rand::seq::index::sample(&mut rng, a.len(), block);
            let sa: Vec<f64> = idx.iter().map(|i| a[i]).collect();
            let sb: Vec<f64> = idx.iter().map(|i| b[i]).collect();
            let less = match kind {
                CostKind::Mvo => mvo_cost_of(&sa, delta) < mvo_cost_of(&sb, delta),
                CostKind::Sr => matches!((sr_cost_of(&sa), sr_cost_of(&sb)), (Some(x), Some(y)) if x < y),
            };
            less as usize
        })
        .sum();
    Ok(wins as f64 / n_samples as f64)
}

#[derive(Debug, Clone)]
pub struct BacktestRun {
    pub decisions: Decisions,
    /// Date on which each daily return is realized.
    pub return_dates: Vec<NaiveDate>,
    pub report: PerformanceReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dominance {
    pub model: Estimator,
    pub baseline: Estimator,
    pub mvo: f64,
    pub sr: f64,
}

#[derive(Debug, Clone)]
pub struct BacktestResult {
    pub runs: Vec<BacktestRun>,
    pub dominance: Vec<Dominance>,
}

/// Decisions, realized returns and reports for every configured estimator,
/// plus the dominance ratio of each ordered pair.
pub fn run_backtest(data: &MarketData, cfg: &BacktestConfig) -> Result<BacktestResult> {
    if data.is_empty() {
        return Err(IpoError::Ingestion("no data rows".into()));
    }
    let (first, last) = (data.dates[0], data.dates[data.len() - 1]);
    if first > cfg.train_start || last < cfg.oos_end {
        return Err(IpoError::Ingestion(format!(
            "data covers {first}..{last} but the configuration needs {}..{}",
            cfg.train_start, cfg.oos_end
        )));
    }
    let h = cfg.execution_lag + 1;
    let mut runs = Vec::with_capacity(cfg.estimators.len());
    for &est in &cfg.estimators {
        let decisions = decide(data, cfg, est)?;
        let mut daily = Vec::new();
        let mut return_dates = Vec::new();
        for (z, &i) in decisions.weights.iter().zip(&decisions.indices) {
            if i + h < data.len() {
                daily.push(z.dot(&data.returns[i + h]));
                return_dates.push(data.dates[i + h]);
            }
        }
        let report = metrics(&daily, cfg.delta)?;
        runs.push(BacktestRun { decisions, return_dates, report });
    }
    let mut dominance = Vec::new();
    for a in &runs {
        for b in &runs {
            if a.decisions.estimator == b.decisions.estimator {
                continue;
            }
            let (ra, rb) = (&a.report.daily_returns, &b.report.daily_returns);
            let dr = |kind| bootstrap_dominance(ra, rb, cfg.delta, cfg.bootstrap_samples, cfg.bootstrap_block, cfg.seed, kind);
            dominance.push(Dominance {
                model: a.decisions.estimator,
                baseline: b.decisions.estimator,
                mvo: dr(CostKind::Mvo)?,
                sr: dr(CostKind::Sr)?,
            });
        }
    }
    Ok(BacktestResult { runs, dominance })
}

/// `decision_date,return_date,<estimator…>` with one row per realized day.
pub fn write_daily_csv(result: &BacktestResult, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["decision_date".to_string(), "return_date".to_string()];
    header.extend(result.runs.iter().map(|r| r.decisions.estimator.to_string()));
    w.write_record(&header)?;
    if let Some(first) = result.runs.first() {
        for t in 0..first.return_dates.len() {
            let mut row = vec![first.decisions.dates[t].to_string(), first.return_dates[t].to_string()];
            row.extend(result.runs.iter().map(|r| format!("{:e}", r.report.daily_returns[t])));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Synthetic daily market: AR(1) unit-variance features and returns
/// `r_t = Σ θ x_{t−horizon} + ε_t` with equicorrelated Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticMarket {
    pub n_assets: usize,
    pub features_per_asset: usize,
    pub n_days: usize,
    pub start: NaiveDate,
    /// Daily noise volatility of each asset.
    pub vol: f64,
    /// Pairwise noise correlation.
    pub rho: f64,
    pub persistence: f64,
    /// Average signal variance over noise variance.
    pub snr: f64,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for SyntheticMarket {
    fn default() -> Self {
        SyntheticMarket {
            n_assets: 8,
            features_per_asset: 1,
            n_days: 1500,
            start: NaiveDate::from_ymd_opt(2010, 1, 4).expect("valid date"),
            vol: 0.01,
            rho: 0.3,
            persistence: 0.98,
            snr: 0.01,
            horizon: 2,
            seed: 0,
        }
    }
}

impl SyntheticMarket {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_assets >= 1
            && self.features_per_asset >= 1
            && self.n_days > self.horizon
            && self.vol > 0.0
            && (0.0..1.0).contains(&self.rho)
            && (0.0..1.0).contains(&self.persistence)
            && self.snr >= 0.0
            && self.horizon >= 1;
        if ok {
            Ok(())
        } else {
            Err(IpoError::InvalidConfig(format!("invalid synthetic market: {self:?}")))
        }
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.n_assets;
        let v2 = self.vol * self.vol;
        DMatrix::from_fn(d, d, |i, j| if i == j { v2 } else { self.rho * v2 })
    }

    /// Weekday dates from `start`.
    pub fn dates(&self) -> Vec<NaiveDate> {
        self.start
            .iter_days()
            .filter(|d| !matches!(d.weekday(), Weekday::Sat | Weekday::Sun))
            .take(self.n_days)
            .collect()
    }

    /// The generated data and the coefficients behind it.
    pub fn generate(&self) -> Result<(MarketData, DVector<f64>)> {
        self.validate()?;
        let (d, k) = (self.n_assets, self.features_per_asset);
        let d_x = d * k;
        let normal = |rng: &mut crate::rng::StreamRng| -> f64 { StandardNormal.sample(rng) };
        let mut rng = stream(self.seed, "market/theta");
        let unit = DVector::from_fn(d_x, |_, _| normal(&mut rng));
        let scale = if unit.norm_squared() > 0.0 {
            (self.snr * self.vol * self.vol * d as f64 / unit.norm_squared()).sqrt()
        } else {
            0.0
        };
        let theta = unit * scale;

        let mask = DesignMask::block(d, k);
        let phi = self.persistence;
        let innov = (1.0 - phi * phi).sqrt();
        let mut rng = stream(self.seed, "market/features");
        let mut x = DVector::from_fn(d_x, |_, _| normal(&mut rng));
        let mut features = Vec::with_capacity(self.n_days);
        for _ in 0..self.n_days {
            features.push(x.clone());
            x = &x * phi + DVector::from_fn(d_x, |_, _| normal(&mut rng)) * innov;
        }
        let chol = nalgebra::Cholesky::new(self.covariance())
            .ok_or_else(|| IpoError::NotPositiveDefinite("synthetic noise covariance".into()))?;
        let mut rng = stream(self.seed, "market/noise");
        let returns = (0..self.n_days)
            .map(|t| {
                let eps = chol.l() * DVector::from_fn(d, |_, _| normal(&mut rng));
                if t >= self.horizon {
                    mask.apply(&features[t - self.horizon], &theta) + eps
                } else {
                    eps
                }
            })
            .collect();
        let assets: Vec<String> = (0..d).map(|j| format!("A{}", j + 1)).collect();
        let feature_names = assets
            .iter()
            .flat_map(|a| (0..k).map(move |q| if k == 1 { a.clone() } else { format!("{a}:f{}", q + 1) }))
            .collect();
        let data = MarketData { dates: self.dates(), assets, feature_names, returns, features, mask };
        Ok((data, theta))
    }
}
