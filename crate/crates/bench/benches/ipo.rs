use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use ipo_bench::{mvo_inputs, sim_panel};
use ipo_core::estimators::{assemble, fit_ols, solve_ipo, IpoCase, ThetaConstraints};
use ipo_core::qpdiff::backward;
use ipo_core::solver::solve_inequality;
use ipo_core::trainer::loss_and_grad;
use ipo_core::{FeasibleRegion, IpmConfig};

fn estimators(c: &mut Criterion) {
    let mut g = c.benchmark_group("fit");
    g.sample_size(10);
    for d_z in [25, 50] {
        let (panel, p) = sim_panel(d_z, 3, 1000);
        let region = FeasibleRegion::unconstrained(d_z, 1.0).unwrap();
        let theta = nalgebra::DVector::from_element(p.d_x(), 1e-3);
        g.bench_with_input(BenchmarkId::new("ols", d_z), &d_z, |b, _| b.iter(|| fit_ols(&panel, &p).unwrap()));
        g.bench_with_input(BenchmarkId::new("ipo", d_z), &d_z, |b, _| {
            b.iter(|| {
                let q = assemble(&panel, &p, 1.0, IpoCase::Unconstrained).unwrap();
                solve_ipo(&q, &ThetaConstraints::none()).unwrap()
            })
        });
        g.bench_with_input(BenchmarkId::new("grad_step", d_z), &d_z, |b, _| {
            b.iter(|| loss_and_grad(&panel, &p, &region, &theta, &IpmConfig::default()).unwrap())
        });
    }
    g.finish();
}

fn qp_layer(c: &mut Criterion) {
    let mut g = c.benchmark_group("qp");
    for d_z in [10, 25, 50] {
        let (y, v) = mvo_inputs(d_z);
        let region = FeasibleRegion::boxed(d_z, 0.125, Some(0.0), 10.0).unwrap();
        let cfg = IpmConfig::default();
        g.bench_with_input(BenchmarkId::new("box_solve", d_z), &d_z, |b, _| {
            b.iter(|| solve_inequality(&y, &v, &region, &cfg).unwrap())
        });
        let sol = solve_inequality(&y, &v, &region, &cfg).unwrap();
        let dz = nalgebra::DVector::from_element(d_z, 1.0);
        g.bench_with_input(BenchmarkId::new("box_backward", d_z), &d_z, |b, _| {
            b.iter(|| backward(&sol, &region, &dz).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, estimators, qp_layer);
criterion_main!(benches);
