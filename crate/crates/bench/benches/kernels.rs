use std::hint::black_box;

use consol_bench::{builtin, consolidation, points};
use consol_core::oracle::{alpha_star_grid, GridSpec};
use consol_core::{control_u, run_closed_loop, IntegrationSettings};
use criterion::{criterion_group, criterion_main, Criterion};

fn consolidation_kernels(c: &mut Criterion) {
    let cons = consolidation("scenario_b_case_a");
    let pts = points(256, 6.0);
    c.bench_function("alpha_256pts", |b| {
        b.iter(|| pts.iter().map(|p| cons.alpha(1.3, p).unwrap()).sum::<f64>())
    });
    c.bench_function("evaluate_256pts", |b| {
        b.iter(|| {
            pts.iter()
                .map(|p| cons.evaluate(1.3, p).unwrap().dalpha_dt)
                .sum::<f64>()
        })
    });
    c.bench_function("hessian_256pts", |b| {
        b.iter(|| pts.iter().map(|p| cons.hessian_alpha(1.3, p).unwrap()[(0, 1)]).sum::<f64>())
    });
}

fn controller_kernel(c: &mut Criterion) {
    let built = builtin("scenario_a_outside");
    let sc = &built.scenario;
    let x = &sc.x0[..4];
    c.bench_function("control_u", |b| {
        b.iter(|| control_u(&sc.cons, &sc.controller, black_box(-1.0), 0.5, x).unwrap().0[0])
    });
}

fn oracle_grid(c: &mut Criterion) {
    let cons = consolidation("scenario_b_case_a");
    let grid = GridSpec::new(vec![-10.0, -10.0], vec![10.0, 10.0], 101).unwrap();
    c.bench_function("alpha_star_grid_101", |b| {
        b.iter(|| alpha_star_grid(&cons, black_box(10.0), &grid).unwrap().alpha_star)
    });
}

fn closed_loop(c: &mut Criterion) {
    let mut sc = builtin("scenario_b_case_a").scenario;
    sc.integration = IntegrationSettings {
        horizon: 1.0,
        ..sc.integration
    };
    let mut group = c.benchmark_group("closed_loop");
    group.sample_size(10);
    group.bench_function("scenario_b_1s", |b| b.iter(|| run_closed_loop(&sc).unwrap().records.len()));
    group.finish();
}

criterion_group!(benches, consolidation_kernels, controller_kernel, oracle_grid, closed_loop);
criterion_main!(benches);
