//! `ipo`: simulations, fits and walk-forward backtests from TOML configs.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::SimKind;
use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "ipo", version, about = "Integrated prediction and optimization experiments")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output; repeat for debug level.
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct WithData {
    #[command(flatten)]
    common: Common,
    /// Directory holding returns.csv and features.csv.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Out-of-sample cost of OLS vs IPO over correlation, SNR and estimate quality.
    Sim1(Common),
    /// Fitting time of OLS, analytic IPO and IPO-GRAD by universe size.
    Sim2(Common),
    /// Box-constrained heuristic IPO vs IPO-GRAD.
    Sim3(Common),
    /// Walk-forward backtest with performance report and dominance ratios.
    Backtest(WithData),
    /// Fit estimators on a data set and write their coefficients.
    Fit(WithData),
    /// Generate a synthetic market data set.
    Synth {
        /// Optional TOML file with a [synth] section.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Sim1(c) => commands::cmd_sim(SimKind::Sim1, &c.config, &c.out, c.seed),
        Command::Sim2(c) => commands::cmd_sim(SimKind::Sim2, &c.config, &c.out, c.seed),
        Command::Sim3(c) => commands::cmd_sim(SimKind::Sim3, &c.config, &c.out, c.seed),
        Command::Backtest(w) => commands::cmd_backtest(&w.common.config, &w.data, &w.common.out, w.common.seed),
        Command::Fit(w) => commands::cmd_fit(&w.common.config, &w.data, &w.common.out, w.common.seed),
        Command::Synth { config, out, seed } => commands::cmd_synth(config.as_deref(), &out, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(e.exit_code())
        }
    }
}
