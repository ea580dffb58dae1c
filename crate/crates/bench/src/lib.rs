//! Shared inputs for the criterion benches under `benches/`.

use ipo_core::simlab::{generate_ground_truth, generate_panel, SimSpec};
use ipo_core::{DesignMask, ObservationPanel};
use nalgebra::{DMatrix, DVector};

/// Simulation-style training panel with `k` features per asset.
pub fn sim_panel(d_z: usize, k: usize, n_obs: usize) -> (ObservationPanel, DesignMask) {
    let spec = SimSpec { d_z, d_x_per_asset: k, n_obs, seed: 1, ..SimSpec::default() };
    let truth = generate_ground_truth(&spec).expect("valid spec");
    (generate_panel(&spec, &truth).expect("valid spec"), spec.mask())
}

/// Toeplitz covariance and a deterministic expected-return vector.
pub fn mvo_inputs(d_z: usize) -> (DVector<f64>, DMatrix<f64>) {
    let v = DMatrix::from_fn(d_z, d_z, |i, j| 1e-4 * 0.3f64.powi((i as i32 - j as i32).abs()));
    let y = DVector::from_fn(d_z, |i, _| 1e-3 * ((i as f64) * 1.7).sin());
    (y, v)
}
