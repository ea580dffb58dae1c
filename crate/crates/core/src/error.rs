use thiserror::Error;

pub type Result<T, E = IpoError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum IpoError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not symmetric: {0}")]
    NotSymmetric(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("insufficient sample: need at least {needed} observations, got {got}")]
    InsufficientSample { needed: usize, got: usize },

    #[error("infeasible region: {0}")]
    Infeasible(String),

    #[error("degenerate region: {0}")]
    DegenerateRegion(String),

    #[error("solver did not converge after {iterations} iterations (kkt residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("KKT system is singular at the solution (active set {active:?}, degenerate {degenerate:?})")]
    Differentiation {
        active: Vec<usize>,
        degenerate: Vec<usize>,
    },

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("QP failure at training iteration {iteration}: {source}")]
    TrainingQp {
        iteration: usize,
        #[source]
        source: Box<IpoError>,
    },

    #[error("step size error at iteration {iteration}: {reason}")]
    StepSize { iteration: usize, reason: String },

    #[error("backtest failed on {date}: {source}")]
    Backtest {
        date: String,
        #[source]
        source: Box<IpoError>,
    },

    #[error("degenerate metric: {0}")]
    DegenerateMetric(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl IpoError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        IpoError::Dimension(msg.into())
    }
}
