//! Regression coefficients estimated through a downstream mean-variance
//! portfolio program.

pub mod backtest;
pub mod covariance;
pub mod error;
pub mod estimators;
pub mod io;
pub mod linalg;
pub mod model;
pub mod par;
pub mod qpdiff;
pub mod rng;
pub mod simlab;
pub mod solver;
pub mod trainer;

pub use error::{IpoError, Result};
pub use model::{
    mvo_cost, predict_returns, residual_covariance, Coefficients, DesignMask, EstimatorTag, FactoredCov,
    FeasibleRegion, Observation, ObservationPanel, RegionKind, ResidualCovariance,
};
pub use solver::{IpmConfig, NullspaceReduction, QpSolution};
