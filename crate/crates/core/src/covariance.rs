//! Covariance estimates: sample covariance and the EWMA recursion.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{IpoError, Result};
use crate::linalg::{condition_number, symmetrize};

const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EwmaConfig {
    pub decay: f64,
    /// Number of leading returns used for the seed covariance.
    pub burn_in: usize,
}

impl EwmaConfig {
    pub fn validate(&self, d_z: usize) -> Result<()> {
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(IpoError::InvalidConfig(format!("ewma decay must lie in (0,1), got {}", self.decay)));
        }
        if self.burn_in < d_z + 1 {
            return Err(IpoError::InvalidConfig(format!(
                "ewma burn_in must be at least d_z + 1 = {}, got {}",
                d_z + 1,
                self.burn_in
            )));
        }
        Ok(())
    }
}

/// Unbiased sample covariance `(1/(s−1)) Σ (y − ȳ)(y − ȳ)ᵀ`.
pub fn sample_covariance(returns: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let s = returns.len();
    if s < 2 {
        return Err(IpoError::InsufficientSample { needed: 2, got: s });
    }
    let d = returns[0].len();
    if returns.iter().any(|r| r.len() != d) {
        return Err(IpoError::dim("return vectors of unequal length"));
    }
    let mut mean = DVector::zeros(d);
    for r in returns {
        mean += r;
    }
    mean /= s as f64;
    let mut cov = DMatrix::zeros(d, d);
    for r in returns {
        let c = r - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= (s - 1) as f64;
    symmetrize(&mut cov);
    Ok(cov)
}

/// Sample covariance of the rows of `y` (s × d), computed with one matrix product.
pub fn sample_covariance_rows(y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s = y.nrows();
    if s < 2 {
        return Err(IpoError::InsufficientSample { needed: 2, got: s });
    }
    let mean = y.row_mean();
    let mut c = y.clone();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    let mut cov = c.tr_mul(&c) / (s - 1) as f64;
    symmetrize(&mut cov);
    Ok(cov)
}

/// EWMA covariance series aligned with `returns`.
///
/// Entry `t` is `None` for `t < burn_in − 1` (not enough history). Entry
/// `burn_in − 1` is the sample covariance of the first `burn_in` returns and
/// later entries follow `V_t = λV_{t−1} + (1−λ) y_t y_tᵀ`.
pub fn ewma_covariance(returns: &[DVector<f64>], cfg: &EwmaConfig) -> Result<Vec<Option<DMatrix<f64>>>> {
    let d = returns.first().map(|r| r.len()).unwrap_or(0);
    cfg.validate(d)?;
    if returns.len() < cfg.burn_in + 1 {
        return Err(IpoError::InsufficientSample { needed: cfg.burn_in + 1, got: returns.len() });
    }
    let seed = sample_covariance(&returns[..cfg.burn_in])?;
    if nalgebra::Cholesky::new(seed.clone()).is_none() {
        return Err(IpoError::NotPositiveDefinite("EWMA seed covariance is singular".into()));
    }
    let mut out = Vec::with_capacity(returns.len());
    out.resize(cfg.burn_in - 1, None);
    let mut v = seed;
    out.push(Some(jittered(&v, cfg.burn_in - 1)));
    for (t, y) in returns.iter().enumerate().skip(cfg.burn_in) {
        v *= cfg.decay;
        v.ger(1.0 - cfg.decay, y, y, 1.0);
        symmetrize(&mut v);
        out.push(Some(jittered(&v, t)));
    }
    Ok(out)
}

fn jittered(v: &DMatrix<f64>, t: usize) -> DMatrix<f64> {
    let cond = condition_number(v);
    if cond > MAX_CONDITION {
        let d = v.nrows();
        let eps = 1e-10 * v.trace() / d as f64;
        log::warn!("EWMA covariance at index {t} has condition number {cond:.3e}; adding jitter {eps:.3e}");
        v + DMatrix::identity(d, d) * eps
    } else {
        v.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::min_eigenvalue;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn sample_covariance_examples() {
        let c = sample_covariance(&[v(&[1.0, 0.0]), v(&[-1.0, 0.0])]).unwrap();
        assert_eq!(c, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));
        let c = sample_covariance(&[v(&[0.3, 0.1]), v(&[0.3, 0.1]), v(&[0.3, 0.1])]).unwrap();
        assert!(c.amax() < 1e-16);
        assert!(sample_covariance(&[v(&[1.0])]).is_err());
        let rows = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 0.3, 0.0]);
        let direct = sample_covariance(&[v(&[1.0, 2.0]), v(&[-1.0, 0.5]), v(&[0.3, 0.0])]).unwrap();
        assert_relative_eq!(sample_covariance_rows(&rows).unwrap(), direct, epsilon = 1e-15);
    }

    #[test]
    fn resolution_reduces_error() {
        let d = 5;
        let l = DMatrix::from_fn(d, d, |j, k| if k <= j { 0.5_f64.powi((j - k) as i32) } else { 0.0 });
        let vt = &l * l.transpose();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut err = |res: usize| {
            let mut total = 0.0;
            for _ in 0..200 {
                let draws: Vec<_> = (0..res * d)
                    .map(|_| &l * DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng)))
                    .collect();
                total += (sample_covariance(&draws).unwrap() - &vt).norm();
            }
            total / 200.0
        };
        let (e5, e20) = (err(5), err(20));
        assert!(e20 < e5, "{e20} !< {e5}");
    }

    #[test]
    fn ewma_one_step_scalar() {
        // seed from (1, -1): sample variance 2; choose returns so the seed is 1
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let series = vec![v(&[s]), v(&[-s]), v(&[2.0])];
        let out = ewma_covariance(&series, &EwmaConfig { decay: 0.94, burn_in: 2 }).unwrap();
        assert!(out[0].is_none());
        assert_relative_eq!(out[1].as_ref().unwrap()[(0, 0)], 1.0, epsilon = 1e-15);
        assert_relative_eq!(out[2].as_ref().unwrap()[(0, 0)], 1.18, epsilon = 1e-14);
    }

    #[test]
    fn ewma_geometric_decay_on_zero_returns() {
        let mut series = vec![v(&[1.0, 0.5]), v(&[-1.0, 0.2]), v(&[0.3, -0.7])];
        series.extend((0..10).map(|_| v(&[0.0, 0.0])));
        let cfg = EwmaConfig { decay: 0.9, burn_in: 3 };
        let out = ewma_covariance(&series, &cfg).unwrap();
        let seed = out[2].clone().unwrap();
        for (k, vt) in out.iter().enumerate().skip(3) {
            let want = &seed * 0.9_f64.powi((k - 2) as i32);
            assert_relative_eq!(vt.clone().unwrap(), want, epsilon = 1e-14);
        }
    }

    #[test]
    fn ewma_is_psd_and_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut series: Vec<DVector<f64>> =
            (0..60).map(|_| DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng))).collect();
        let cfg = EwmaConfig { decay: 0.94, burn_in: 10 };
        let out = ewma_covariance(&series, &cfg).unwrap();
        for vt in out.iter().flatten() {
            assert_eq!(vt, &vt.transpose());
            assert!(min_eigenvalue(vt) >= -1e-10);
        }
        series[31] = v(&[10.0, -10.0, 3.0]);
        let perturbed = ewma_covariance(&series, &cfg).unwrap();
        assert_eq!(out[..31], perturbed[..31]);
        assert_ne!(out[31], perturbed[31]);
    }

    #[test]
    fn ewma_validation() {
        let series = vec![v(&[1.0, 0.0]); 5];
        assert!(ewma_covariance(&series, &EwmaConfig { decay: 1.0, burn_in: 3 }).is_err());
        assert!(ewma_covariance(&series, &EwmaConfig { decay: 0.9, burn_in: 2 }).is_err());
        assert!(matches!(
            ewma_covariance(&series[..3], &EwmaConfig { decay: 0.9, burn_in: 3 }),
            Err(IpoError::InsufficientSample { .. })
        ));
        assert!(matches!(
            ewma_covariance(&series, &EwmaConfig { decay: 0.9, burn_in: 3 }),
            Err(IpoError::NotPositiveDefinite(_))
        ));
    }
}
