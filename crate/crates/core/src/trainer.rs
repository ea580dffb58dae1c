//! Gradient-descent estimation of θ through the MVO layer.

use std::path::Path;
use std::time::Instant;

use nalgebra::{Cholesky, DVector, Dyn};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{IpoError, Result};
use crate::linalg::check_len;
use crate::model::{mvo_cost, Coefficients, DesignMask, EstimatorTag, FeasibleRegion, ObservationPanel, RegionKind};
use crate::par::chunked_fold;
use crate::qpdiff::ActiveSetKkt;
use crate::rng::stream;
use crate::solver::{reduced_factor, solve_equality_factored, solve_inequality, solve_region, strictly_interior, IpmConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub step_size: f64,
    /// `None` for full batch.
    pub batch_size: Option<usize>,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub seed: u64,
    /// Standard deviation of the normal initial θ.
    pub init_scale: f64,
    /// Stop (unconverged) once the step has been halved below this.
    pub min_step: f64,
    /// Full batch: factor applied to the step after each accepted iteration,
    /// capped at `step_size`. 1 keeps halved steps for good.
    pub step_growth: f64,
    pub ipm: IpmConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            step_size: 0.05,
            batch_size: None,
            max_iters: 10_000,
            grad_tol: 1e-6,
            seed: 0,
            init_scale: 1.0,
            min_step: 1e-20,
            step_growth: 2.0,
            ipm: IpmConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(IpoError::InvalidConfig(format!("trainer {what} must be positive")));
        if !(self.step_size > 0.0) {
            return bad("step_size");
        }
        if !(self.grad_tol > 0.0) {
            return bad("grad_tol");
        }
        if !(self.init_scale >= 0.0) {
            return Err(IpoError::InvalidConfig("trainer init_scale must be non-negative".into()));
        }
        if !(self.step_growth >= 1.0) {
            return Err(IpoError::InvalidConfig("trainer step_growth must be at least 1".into()));
        }
        if self.max_iters == 0 {
            return bad("max_iters");
        }
        if self.batch_size == Some(0) {
            return bad("batch_size");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub coefficients: Coefficients,
    pub iterations: usize,
    pub grad_norm: f64,
    pub loss: f64,
    pub converged: bool,
    /// Observations whose backward system needed regularization at the end.
    pub regularized: usize,
    pub trace: Vec<TraceRow>,
}

pub fn write_trace_csv(trace: &[TraceRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in trace {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

enum Layer {
    Unconstrained,
    Equality(Vec<Cholesky<f64, Dyn>>),
    /// Relaxed factors (equality rows only) for the interior shortcut.
    Inequality(Option<Vec<Cholesky<f64, Dyn>>>),
}

struct Model<'a> {
    panel: &'a ObservationPanel,
    p: &'a DesignMask,
    region: &'a FeasibleRegion,
    layer: Layer,
    ipm: IpmConfig,
}

struct Eval {
    loss: f64,
    grad: DVector<f64>,
    regularized: usize,
}

impl<'a> Model<'a> {
    fn new(panel: &'a ObservationPanel, p: &'a DesignMask, region: &'a FeasibleRegion, ipm: IpmConfig) -> Result<Self> {
        p.check_panel(panel)?;
        if region.d_z() != panel.d_z() {
            return Err(IpoError::dim(format!("region has d_z={} but panel has {}", region.d_z(), panel.d_z())));
        }
        if !panel.has_v_true() {
            return Err(IpoError::Estimation("realized covariance missing; attach v_true".into()));
        }
        let layer = match region.kind() {
            RegionKind::Unconstrained => Layer::Unconstrained,
            RegionKind::Equality => {
                let red = region.reduction().expect("reduction present");
                let factors = panel
                    .observations()
                    .par_iter()
                    .map(|o| reduced_factor(o.v_hat().matrix(), red))
                    .collect::<Result<Vec<_>>>()?;
                Layer::Equality(factors)
            }
            RegionKind::Inequality => Layer::Inequality(match region.reduction() {
                Some(red) => Some(
                    panel
                        .observations()
                        .par_iter()
                        .map(|o| reduced_factor(o.v_hat().matrix(), red))
                        .collect::<Result<Vec<_>>>()?,
                ),
                None => None,
            }),
        };
        Ok(Model { panel, p, region, layer, ipm })
    }

    /// Cost and θ-gradient for observation `i`.
    fn observe(&self, i: usize, theta: &DVector<f64>, cache: &mut Option<ActiveSetKkt>, iteration: usize) -> Result<(f64, DVector<f64>, bool)> {
        let o = self.panel.get(i);
        let delta = self.region.delta();
        let v = o.v_true().expect("checked").matrix();
        let y_hat = self.p.apply(&o.x, theta);
        let wrap = |e: IpoError| IpoError::TrainingQp { iteration, source: Box::new(e) };
        let (z, dyhat, reg) = match &self.layer {
            Layer::Unconstrained => {
                let z = o.v_hat().solve(&y_hat) / delta;
                let g = -&o.y + v * &z * delta;
                (z, o.v_hat().solve(&g) / delta, false)
            }
            Layer::Equality(factors) => {
                let red = self.region.reduction().expect("reduction present");
                let z = solve_equality_factored(&y_hat, o.v_hat().matrix(), delta, red, &factors[i]);
                let g = -&o.y + v * &z * delta;
                let dy = &red.f * factors[i].solve(&red.f.tr_mul(&g)) / delta;
                (z, dy, false)
            }
            Layer::Inequality(factors) => {
                let relaxed = match (factors, self.region.reduction()) {
                    (Some(f), Some(red)) => solve_equality_factored(&y_hat, o.v_hat().matrix(), delta, red, &f[i]),
                    _ => o.v_hat().solve(&y_hat) / delta,
                };
                if strictly_interior(&relaxed, self.region) {
                    let g = -&o.y + v * &relaxed * delta;
                    let dy = match (factors, self.region.reduction()) {
                        (Some(f), Some(red)) => &red.f * f[i].solve(&red.f.tr_mul(&g)) / delta,
                        _ => o.v_hat().solve(&g) / delta,
                    };
                    let cost = mvo_cost(&relaxed, &o.y, v, delta)?;
                    return Ok((cost, self.p.transpose_apply(&o.x, &dy), false));
                }
                if let Some(kkt) = cache.as_ref() {
                    if let Some(z) = kkt.warm_solve(&(-&y_hat), self.region.b(), self.region.g(), self.region.h()) {
                        let g = -&o.y + v * &z * delta;
                        let cost = mvo_cost(&z, &o.y, v, delta)?;
                        return Ok((cost, self.p.transpose_apply(&o.x, &kkt.yhat_grad(&g)), false));
                    }
                }
                let sol = solve_inequality(&y_hat, o.v_hat().matrix(), self.region, &self.ipm).map_err(wrap)?;
                let active = sol.tight_active_set();
                if cache.as_ref().map(|c| c.active() != active.as_slice()).unwrap_or(true) {
                    *cache = Some(
                        ActiveSetKkt::new(sol.q(), self.region.a(), self.region.g(), active).map_err(wrap)?,
                    );
                }
                let kkt = cache.as_ref().expect("just filled");
                let g = -&o.y + v * &sol.z * delta;
                let reg = kkt.regularized() || !sol.degenerate.is_empty();
                (sol.z.clone(), kkt.yhat_grad(&g), reg)
            }
        };
        let cost = mvo_cost(&z, &o.y, v, delta)?;
        Ok((cost, self.p.transpose_apply(&o.x, &dyhat), reg))
    }

    fn evaluate(&self, idx: &[usize], theta: &DVector<f64>, caches: &mut [Option<ActiveSetKkt>], iteration: usize) -> Result<Eval> {
        let mut slots: Vec<(usize, &mut Option<ActiveSetKkt>)> = Vec::with_capacity(idx.len());
        // idx is sorted and unique within a batch, so the caches can be split disjointly
        let mut rest = caches;
        let mut offset = 0;
        for &i in idx {
            let (_, tail) = rest.split_at_mut(i - offset);
            let (slot, tail) = tail.split_first_mut().expect("index in range");
            slots.push((i, slot));
            rest = tail;
            offset = i + 1;
        }
        let parts: Vec<Result<(f64, DVector<f64>, bool)>> = slots
            .into_par_iter()
            .map(|(i, slot)| self.observe(i, theta, slot, iteration))
            .collect();
        let mut loss = 0.0;
        let mut grad = DVector::zeros(theta.len());
        let mut regularized = 0;
        for part in parts {
            let (c, g, r) = part?;
            loss += c;
            grad += g;
            regularized += r as usize;
        }
        let n = idx.len() as f64;
        Ok(Eval { loss: loss / n, grad: grad / n, regularized })
    }
}

/// Empirical MVO loss `(1/m) Σ c(z*(ŷ), y)` with the realized covariance.
pub fn loss_full(panel: &ObservationPanel, p: &DesignMask, region: &FeasibleRegion, theta: &DVector<f64>) -> Result<f64> {
    p.check_panel(panel)?;
    check_len(theta, p.d_x(), "theta")?;
    if !panel.has_v_true() {
        return Err(IpoError::Estimation("realized covariance missing; attach v_true".into()));
    }
    let cfg = IpmConfig::default();
    let obs = panel.observations();
    let total = chunked_fold(
        obs.len(),
        || 0.0,
        |acc, i| {
            let o = &obs[i];
            let z = solve_region(&p.apply(&o.x, theta), o.v_hat().matrix(), region, &cfg)?;
            *acc += mvo_cost(&z, &o.y, o.v_true().expect("checked").matrix(), region.delta())?;
            Ok(())
        },
        |a, b| *a += b,
    )?;
    Ok(total / panel.len() as f64)
}

/// Loss and its θ-gradient through the MVO layer, from a cold start.
pub fn loss_and_grad(
    panel: &ObservationPanel,
    p: &DesignMask,
    region: &FeasibleRegion,
    theta: &DVector<f64>,
    ipm: &IpmConfig,
) -> Result<(f64, DVector<f64>)> {
    check_len(theta, p.d_x(), "theta")?;
    let model = Model::new(panel, p, region, *ipm)?;
    let all: Vec<usize> = (0..panel.len()).collect();
    let mut caches: Vec<Option<ActiveSetKkt>> = (0..panel.len()).map(|_| None).collect();
    let e = model.evaluate(&all, theta, &mut caches, 0)?;
    Ok((e.loss, e.grad))
}

fn initial_theta(d_x: usize, cfg: &TrainConfig) -> DVector<f64> {
    let mut rng = stream(cfg.seed, "trainer/init");
    DVector::from_fn(d_x, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * cfg.init_scale
    })
}

/// Gradient descent from a seeded normal initialization.
///
/// Full batch: a trial step is accepted when the loss does not increase
/// beyond rounding noise and, on convex regions, the new gradient does not
/// reverse against the old one (the Armijo condition with c = ½ for a
/// quadratic, evaluated without cancellation). Rejected steps halve the step
/// size, so the full-batch loss never increases. Stochastic batches take plain
/// steps and check the full loss and gradient once per epoch; a loss above
/// 1e6 times the initial one is reported as a step-size error.
pub fn train(panel: &ObservationPanel, p: &DesignMask, region: &FeasibleRegion, cfg: &TrainConfig) -> Result<TrainOutput> {
    train_from(panel, p, region, cfg, initial_theta(p.d_x(), cfg))
}

pub fn train_from(
    panel: &ObservationPanel,
    p: &DesignMask,
    region: &FeasibleRegion,
    cfg: &TrainConfig,
    theta0: DVector<f64>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    check_len(&theta0, p.d_x(), "initial theta")?;
    let model = Model::new(panel, p, region, cfg.ipm)?;
    let m = panel.len();
    let all: Vec<usize> = (0..m).collect();
    let mut caches: Vec<Option<ActiveSetKkt>> = (0..m).map(|_| None).collect();
    let start = Instant::now();
    let elapsed = |s: &Instant| s.elapsed().as_secs_f64() * 1e3;

    let mut theta = theta0;
    let mut cur = model.evaluate(&all, &theta, &mut caches, 0)?;
    let initial_loss = cur.loss;
    let mut trace = vec![TraceRow { iteration: 0, loss: cur.loss, grad_norm: cur.grad.norm(), wall_time_ms: elapsed(&start) }];
    let mut iterations = 0;
    let mut converged = cur.grad.norm() < cfg.grad_tol;
    let convex = region.kind() != RegionKind::Inequality;
    let diverged = |loss: f64, it: usize| -> Result<()> {
        if !loss.is_finite() || loss.abs() > 1e6 * initial_loss.abs().max(f64::MIN_POSITIVE) && loss > initial_loss {
            return Err(IpoError::StepSize { iteration: it, reason: format!("loss {loss:.3e} from initial {initial_loss:.3e}") });
        }
        Ok(())
    };

    match cfg.batch_size {
        Some(b) if b < m => {
            let mut epoch = 0;
            while !converged && iterations < cfg.max_iters {
                let mut order = all.clone();
                order.shuffle(&mut stream(cfg.seed, &format!("trainer/epoch/{epoch}")));
                for batch in order.chunks(b) {
                    let mut idx = batch.to_vec();
                    idx.sort_unstable();
                    let e = model.evaluate(&idx, &theta, &mut caches, iterations)?;
                    theta -= &e.grad * cfg.step_size;
                    iterations += 1;
                    if iterations >= cfg.max_iters {
                        break;
                    }
                }
                epoch += 1;
                cur = model.evaluate(&all, &theta, &mut caches, iterations)?;
                diverged(cur.loss, iterations)?;
                let gn = cur.grad.norm();
                trace.push(TraceRow { iteration: iterations, loss: cur.loss, grad_norm: gn, wall_time_ms: elapsed(&start) });
                converged = gn < cfg.grad_tol;
            }
        }
        _ => {
            let mut step = cfg.step_size;
            while !converged && iterations < cfg.max_iters {
                let trial = &theta - &cur.grad * step;
                let next = model.evaluate(&all, &trial, &mut caches, iterations + 1)?;
                let noise = 1e-12 * cur.loss.abs().max(next.loss.abs());
                let decreased = next.loss.is_finite() && next.loss <= cur.loss + noise;
                let no_reversal = !convex || cur.grad.dot(&next.grad) >= 0.0;
                if decreased && no_reversal {
                    theta = trial;
                    cur = next;
                    iterations += 1;
                    let gn = cur.grad.norm();
                    trace.push(TraceRow { iteration: iterations, loss: cur.loss, grad_norm: gn, wall_time_ms: elapsed(&start) });
                    converged = gn < cfg.grad_tol;
                    step = (step * cfg.step_growth).min(cfg.step_size);
                } else {
                    step *= 0.5;
                    if step < cfg.min_step {
                        log::warn!("step size fell below {:e} after {iterations} iterations", cfg.min_step);
                        break;
                    }
                }
            }
        }
    }
    let grad_norm = cur.grad.norm();
    Ok(TrainOutput {
        coefficients: Coefficients::new(theta, EstimatorTag::IpoGrad)?,
        iterations,
        grad_norm,
        loss: cur.loss,
        converged,
        regularized: cur.regularized,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{assemble, solve_ipo, IpoCase, ThetaConstraints};
    use crate::model::Observation;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pd(rng: &mut ChaCha8Rng, n: usize, ridge: f64) -> DMatrix<f64> {
        let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &l * l.transpose() / n as f64 + DMatrix::identity(n, n) * ridge
    }

    fn gauss(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
    }

    fn panel(rng: &mut ChaCha8Rng, m: usize, d_z: usize) -> ObservationPanel {
        let obs = (0..m)
            .map(|_| {
                let vh = random_pd(rng, d_z, 0.5);
                let vt = random_pd(rng, d_z, 0.5);
                Observation::new(gauss(rng, d_z), gauss(rng, d_z) * 0.3, vh, Some(vt)).unwrap()
            })
            .collect();
        ObservationPanel::new(obs).unwrap()
    }

    #[test]
    fn converges_to_analytic_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d_z = 4;
        let p = DesignMask::identity(d_z);
        let data = panel(&mut rng, 60, d_z);
        for region in [FeasibleRegion::unconstrained(d_z, 1.0).unwrap(), FeasibleRegion::budget(d_z, 1.0, 1.0).unwrap()] {
            let q = assemble(&data, &p, 1.0, IpoCase::from_region(&region).unwrap()).unwrap();
            let want = solve_ipo(&q, &ThetaConstraints::none()).unwrap().theta;
            let out = train(&data, &p, &region, &TrainConfig { seed: 3, ..Default::default() }).unwrap();
            assert!(out.converged, "{} iterations, grad {}", out.iterations, out.grad_norm);
            assert!((out.coefficients.theta - want).amax() <= 1e-5);
        }
    }

    #[test]
    fn zero_returns_drive_theta_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = panel(&mut rng, 30, 3);
        let zero = data.with_returns(&vec![DVector::zeros(3); 30]).unwrap();
        let region = FeasibleRegion::unconstrained(3, 2.0).unwrap();
        let out = train(&zero, &DesignMask::identity(3), &region, &TrainConfig::default()).unwrap();
        assert!(out.converged);
        assert!(out.coefficients.theta.amax() <= 1e-5);
    }

    #[test]
    fn full_batch_is_deterministic_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = panel(&mut rng, 40, 3);
        let region = FeasibleRegion::budget(3, 1.0, 1.0).unwrap();
        let cfg = TrainConfig { step_size: 1e-3, max_iters: 200, seed: 9, ..Default::default() };
        let a = train(&data, &DesignMask::identity(3), &region, &cfg).unwrap();
        let b = train(&data, &DesignMask::identity(3), &region, &cfg).unwrap();
        let bits = |o: &TrainOutput| o.trace.iter().map(|r| (r.loss.to_bits(), r.grad_norm.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.coefficients.theta, b.coefficients.theta);
        for w in a.trace.windows(2) {
            assert!(w[1].loss <= w[0].loss);
        }
    }

    #[test]
    fn stochastic_mode_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = panel(&mut rng, 40, 3);
        let region = FeasibleRegion::unconstrained(3, 1.0).unwrap();
        let cfg = TrainConfig { batch_size: Some(8), max_iters: 100, step_size: 0.02, seed: 5, ..Default::default() };
        let a = train(&data, &DesignMask::identity(3), &region, &cfg).unwrap();
        let b = train(&data, &DesignMask::identity(3), &region, &cfg).unwrap();
        assert_eq!(a.coefficients.theta, b.coefficients.theta);
        assert!(a.trace.last().unwrap().loss < a.trace[0].loss);
    }

    #[test]
    fn loss_full_examples() {
        let y = DVector::from_vec(vec![0.4, -0.2]);
        let o = Observation::new(DVector::from_element(2, 1.0), y.clone(), DMatrix::identity(2, 2), Some(DMatrix::identity(2, 2))).unwrap();
        let single = ObservationPanel::new(vec![o]).unwrap();
        let region = FeasibleRegion::unconstrained(2, 1.0).unwrap();
        let theta = DVector::from_vec(vec![0.7, 1.1]);
        let got = loss_full(&single, &DesignMask::identity(2), &region, &theta).unwrap();
        assert!((got - (-theta.dot(&y) + 0.5 * theta.dot(&theta))).abs() <= 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = panel(&mut rng, 20, 3);
        let p = DesignMask::identity(3);
        let q = assemble(&data, &p, 1.0, IpoCase::Unconstrained).unwrap();
        let star = solve_ipo(&q, &ThetaConstraints::none()).unwrap().theta;
        let best = loss_full(&data, &p, &region_for(3), &star).unwrap();
        for _ in 0..100 {
            let eta = DVector::from_fn(3, |_, _| rng.random_range(-0.05..0.05));
            assert!(loss_full(&data, &p, &region_for(3), &(&star + eta)).unwrap() >= best - 1e-15);
        }
        let rev: Vec<usize> = (0..20).rev().collect();
        let shuffled = data.subset(&rev).unwrap();
        let a = loss_full(&data, &p, &region_for(3), &star).unwrap();
        let b = loss_full(&shuffled, &p, &region_for(3), &star).unwrap();
        assert!((a - b).abs() <= 1e-14 * a.abs());
    }

    fn region_for(d_z: usize) -> FeasibleRegion {
        FeasibleRegion::unconstrained(d_z, 1.0).unwrap()
    }

    #[test]
    fn inequality_training_decreases_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = panel(&mut rng, 30, 4);
        let region = FeasibleRegion::boxed(4, 0.3, None, 1.0).unwrap();
        let p = DesignMask::identity(4);
        let out = train(&data, &p, &region, &TrainConfig { max_iters: 300, ..Default::default() }).unwrap();
        assert!(out.loss < out.trace[0].loss);
        let direct = loss_full(&data, &p, &region, &out.coefficients.theta).unwrap();
        assert!((direct - out.loss).abs() <= 1e-10);
    }
}
