use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{NaiveDate, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use ipo_core::backtest::{
    ewma_factors, fit_estimator, run_backtest, write_daily_csv, BacktestConfig, Estimator, PerformanceReport,
    RegionConfig, SyntheticMarket,
};
use ipo_core::covariance::EwmaConfig;
use ipo_core::io::{read_covariance_blocks, write_coefficients_csv, MarketData};
use ipo_core::simlab::{run_sim1, run_sim2, run_sim3, Sim1Config, Sim2Config, Sim3Config};
use ipo_core::trainer::{loss_full, train, write_trace_csv, TrainConfig};
use ipo_core::{FactoredCov, Observation, ObservationPanel};

use crate::error::{CliError, CliResult};
use crate::manifest::{write_json, write_manifest};

/// Reads a TOML file whose top level must be exactly `T`.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("configs serialize to JSON")
}

fn prepare_out(out: &Path) -> CliResult<()> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))
}

fn data_dir(dir: &Path) -> CliResult<MarketData> {
    if !dir.is_dir() {
        return Err(CliError::Config(format!("data directory {} does not exist", dir.display())));
    }
    Ok(MarketData::load_dir(dir)?)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sim1File {
    pub sim1: Sim1Config,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sim2File {
    pub sim2: Sim2Config,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sim3File {
    pub sim3: Sim3Config,
}

pub enum SimKind {
    Sim1,
    Sim2,
    Sim3,
}

pub fn cmd_sim(kind: SimKind, config: &Path, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let started = Utc::now();
    prepare_out(out)?;
    let (name, echo, seed, file) = match kind {
        SimKind::Sim1 => {
            let mut f: Sim1File = load_config(config)?;
            if let Some(s) = seed {
                f.sim1.spec.seed = s;
            }
            let path = out.join("sim1.csv");
            run_sim1(&f.sim1)?.write_csv(&path)?;
            ("sim1", to_json(&f), f.sim1.spec.seed, path)
        }
        SimKind::Sim2 => {
            let mut f: Sim2File = load_config(config)?;
            if let Some(s) = seed {
                f.sim2.spec.seed = s;
            }
            let path = out.join("sim2.csv");
            run_sim2(&f.sim2)?.write_csv(&path)?;
            ("sim2", to_json(&f), f.sim2.spec.seed, path)
        }
        SimKind::Sim3 => {
            let mut f: Sim3File = load_config(config)?;
            if let Some(s) = seed {
                f.sim3.spec.seed = s;
            }
            let path = out.join("sim3.csv");
            run_sim3(&f.sim3)?.write_csv(&path)?;
            ("sim3", to_json(&f), f.sim3.spec.seed, path)
        }
    };
    log::info!("wrote {}", file.display());
    write_manifest(out, name, echo, seed, started, &[file])
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BacktestFile {
    pub backtest: BacktestConfig,
}

#[derive(Debug, Serialize)]
struct EstimatorReport<'a> {
    estimator: Estimator,
    first_decision: Option<NaiveDate>,
    last_return: Option<NaiveDate>,
    days: usize,
    folds: usize,
    #[serde(flatten)]
    metrics: &'a PerformanceReport,
}

#[derive(Debug, Serialize)]
struct BacktestReport<'a> {
    config: &'a BacktestConfig,
    assets: &'a [String],
    features: &'a [String],
    reports: Vec<EstimatorReport<'a>>,
    bootstrap_dominance: &'a [ipo_core::backtest::Dominance],
}

pub fn cmd_backtest(config: &Path, data: &Path, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let started = Utc::now();
    let mut f: BacktestFile = load_config(config)?;
    if let Some(s) = seed {
        f.backtest.seed = s;
        f.backtest.trainer.seed = s;
    }
    let market = data_dir(data)?;
    f.backtest.validate(market.assets.len())?;
    prepare_out(out)?;
    let result = run_backtest(&market, &f.backtest)?;
    let reports = result
        .runs
        .iter()
        .map(|r| EstimatorReport {
            estimator: r.decisions.estimator,
            first_decision: r.decisions.dates.first().copied(),
            last_return: r.return_dates.last().copied(),
            days: r.return_dates.len(),
            folds: r.decisions.coefficients.iter().filter(|c| c.is_some()).count(),
            metrics: &r.report,
        })
        .collect();
    let report = BacktestReport {
        config: &f.backtest,
        assets: &market.assets,
        features: &market.feature_names,
        reports,
        bootstrap_dominance: &result.dominance,
    };
    let report_path = out.join("report.json");
    write_json(&report_path, &report)?;
    let daily_path = out.join("daily.csv");
    write_daily_csv(&result, &daily_path)?;
    write_manifest(out, "backtest", to_json(&f), f.backtest.seed, started, &[report_path, daily_path])
}

fn default_fit_estimators() -> Vec<Estimator> {
    vec![Estimator::Ols, Estimator::Ipo, Estimator::IpoGrad]
}

fn one() -> f64 {
    1.0
}

fn one_day() -> usize {
    1
}

/// Observation `t` pairs the features on date `t` with the return
/// `horizon` rows later and the covariance estimate dated `t`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    #[serde(default = "default_fit_estimators")]
    pub estimators: Vec<Estimator>,
    #[serde(default)]
    pub region: RegionConfig,
    #[serde(default = "one")]
    pub delta: f64,
    #[serde(default = "one_day")]
    pub horizon: usize,
    #[serde(default)]
    pub start: Option<NaiveDate>,
    #[serde(default)]
    pub end: Option<NaiveDate>,
    /// Covariance blocks file (relative to the config file). EWMA estimates
    /// are used when absent.
    #[serde(default)]
    pub covariance: Option<PathBuf>,
    #[serde(default)]
    pub ewma: Option<EwmaConfig>,
    #[serde(default)]
    pub trainer: TrainConfig,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitFile {
    pub fit: FitConfig,
}

#[derive(Debug, Serialize)]
struct FitSummaryRow {
    estimator: Estimator,
    in_sample_loss: f64,
    iterations: Option<usize>,
    converged: Option<bool>,
    grad_norm: Option<f64>,
}

#[derive(Debug, Serialize)]
struct FitSummary {
    observations: usize,
    first_date: NaiveDate,
    last_date: NaiveDate,
    estimators: Vec<FitSummaryRow>,
    /// Largest coefficient difference between analytic IPO and IPO-GRAD.
    max_abs_theta_diff_ipo_vs_grad: Option<f64>,
}

fn fit_panel(market: &MarketData, cfg: &FitConfig, config_dir: &Path) -> CliResult<(ObservationPanel, Vec<NaiveDate>)> {
    let covs: Vec<Option<Arc<FactoredCov>>> = match &cfg.covariance {
        Some(rel) => {
            let path = config_dir.join(rel);
            if !path.is_file() {
                return Err(CliError::Config(format!("covariance file {} does not exist", path.display())));
            }
            let blocks: HashMap<NaiveDate, nalgebra::DMatrix<f64>> =
                read_covariance_blocks(&path, &market.assets)?.into_iter().collect();
            market
                .dates
                .iter()
                .map(|d| blocks.get(d).map(|m| FactoredCov::shared(m.clone(), &format!("covariance on {d}"))).transpose())
                .collect::<ipo_core::Result<_>>()?
        }
        None => {
            let ewma = cfg.ewma.unwrap_or(EwmaConfig { decay: 0.94, burn_in: 63 });
            ewma.validate(market.assets.len())?;
            ewma_factors(market, &ewma)?
        }
    };
    let mut obs = Vec::new();
    let mut dates = Vec::new();
    for i in 0..market.len().saturating_sub(cfg.horizon) {
        let d = market.dates[i];
        if cfg.start.is_some_and(|s| d < s) || cfg.end.is_some_and(|e| d > e) {
            continue;
        }
        if let Some(c) = &covs[i] {
            obs.push(Observation::from_shared(
                market.features[i].clone(),
                market.returns[i + cfg.horizon].clone(),
                c.clone(),
                Some(c.clone()),
            )?);
            dates.push(d);
        }
    }
    if obs.is_empty() {
        return Err(CliError::Config("no observations fall inside the fit window".into()));
    }
    Ok((ObservationPanel::new(obs)?, dates))
}

pub fn cmd_fit(config: &Path, data: &Path, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let started = Utc::now();
    let mut f: FitFile = load_config(config)?;
    if let Some(s) = seed {
        f.fit.trainer.seed = s;
    }
    let cfg = &f.fit;
    if cfg.estimators.is_empty() {
        return Err(CliError::Config("fit.estimators is empty".into()));
    }
    if cfg.horizon == 0 {
        return Err(CliError::Config("fit.horizon must be at least 1".into()));
    }
    cfg.trainer.validate()?;
    let market = data_dir(data)?;
    let region = cfg.region.build(market.assets.len(), cfg.delta)?;
    let (panel, dates) = fit_panel(&market, cfg, config.parent().unwrap_or(Path::new(".")))?;
    prepare_out(out)?;

    let mut files = Vec::new();
    let mut rows = Vec::new();
    let mut thetas = HashMap::new();
    for &est in &cfg.estimators {
        let (coef, row) = match est {
            Estimator::IpoGrad => {
                let t = train(&panel, &market.mask, &region, &cfg.trainer)?;
                if !t.converged {
                    log::warn!("IPO-GRAD stopped after {} iterations, gradient norm {:.3e}", t.iterations, t.grad_norm);
                }
                let trace = out.join("trace_ipo_grad.csv");
                write_trace_csv(&t.trace, &trace)?;
                files.push(trace);
                let row = (Some(t.iterations), Some(t.converged), Some(t.grad_norm));
                (t.coefficients, row)
            }
            _ => (fit_estimator(est, &panel, &market.mask, &region, &cfg.trainer)?, (None, None, None)),
        };
        let path = out.join(format!("coefficients_{}.csv", est.to_string().to_lowercase().replace('-', "_")));
        write_coefficients_csv(&path, &coef, &market.feature_names)?;
        files.push(path);
        rows.push(FitSummaryRow {
            estimator: est,
            in_sample_loss: loss_full(&panel, &market.mask, &region, &coef.theta)?,
            iterations: row.0,
            converged: row.1,
            grad_norm: row.2,
        });
        thetas.insert(est, coef.theta);
    }
    let diff = match (thetas.get(&Estimator::Ipo), thetas.get(&Estimator::IpoGrad)) {
        (Some(a), Some(b)) => Some((a - b).amax()),
        _ => None,
    };
    let summary = FitSummary {
        observations: panel.len(),
        first_date: dates[0],
        last_date: *dates.last().expect("nonempty"),
        estimators: rows,
        max_abs_theta_diff_ipo_vs_grad: diff,
    };
    let summary_path = out.join("summary.json");
    write_json(&summary_path, &summary)?;
    files.push(summary_path);
    write_manifest(out, "fit", to_json(&f), f.fit.trainer.seed, started, &files)
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthFile {
    #[serde(default)]
    pub synth: SyntheticMarket,
}

pub fn cmd_synth(config: Option<&Path>, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let started = Utc::now();
    let mut f: SynthFile = match config {
        Some(c) => load_config(c)?,
        None => SynthFile::default(),
    };
    if let Some(s) = seed {
        f.synth.seed = s;
    }
    let (market, theta) = f.synth.generate()?;
    market.write_dir(out)?;
    let theta_path = out.join("theta.csv");
    let coef = ipo_core::Coefficients::new(theta, ipo_core::EstimatorTag::Ols)?;
    write_coefficients_csv(&theta_path, &coef, &market.feature_names)?;
    let files = [out.join("returns.csv"), out.join("features.csv"), theta_path];
    write_manifest(out, "synth", to_json(&f), f.synth.seed, started, &files)
}
