//! Benchmarks of the data-parallel hot loops against their sequential
//! fallbacks: Monte Carlo path simulation, batch semigroup evaluation over a
//! test-function family, and the per-path Gillespie driver.
//!
//! The `*_parallel` variants run the default (rayon) dispatch; the
//! `*_serial` variants either call the sequential helper directly or pin the
//! pool to one thread, so one run compares both code paths.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use intertwine::diffusion1d::{DiffusionModel, FellerBoundary};
use intertwine::discretize::{build_generator, build_phi, Grid};
use intertwine::expr::Expr;
use intertwine::ips::{gillespie, RateRule, SpinSystem};
use intertwine::order::{generate_test_family, DiffusionOrder, FamilyDomain, OrderSpec};
use intertwine::par;
use intertwine::semigroup::{expm_apply, simulate_ctmc};

fn reflecting_bm(cells: usize) -> (intertwine::discretize::GridOperator, Grid) {
    let model = DiffusionModel::new(
        0.0,
        1.0,
        Expr::Const(1.0),
        Expr::Const(0.0),
        Expr::Const(0.0),
        FellerBoundary::Reflecting,
        FellerBoundary::Reflecting,
    )
    .unwrap();
    let grid = Grid::uniform(0.0, 1.0, cells).unwrap();
    let a_h = build_generator(&model, &grid).unwrap();
    (a_h, grid)
}

#[cfg(feature = "parallel")]
fn single_thread_pool() -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
}

fn bench_simulate_ctmc(c: &mut Criterion) {
    let (a_h, _) = reflecting_bm(99);
    let mut group = c.benchmark_group("simulate_ctmc");
    let paths = 20_000;
    group.bench_function(BenchmarkId::new("paths", "parallel"), |b| {
        b.iter(|| simulate_ctmc(&a_h, 50, 0.005, 7, paths).unwrap())
    });
    #[cfg(feature = "parallel")]
    {
        let pool = single_thread_pool();
        group.bench_function(BenchmarkId::new("paths", "serial"), |b| {
            b.iter(|| pool.install(|| simulate_ctmc(&a_h, 50, 0.005, 7, paths).unwrap()))
        });
    }
    group.finish();
}

fn bench_family_evolution(c: &mut Criterion) {
    let (a_h, grid) = reflecting_bm(100);
    let phi = build_phi(DiffusionOrder::Increasing, &grid).unwrap();
    let family = generate_test_family(
        &OrderSpec::Increasing,
        &FamilyDomain::Grid1d(grid.points.clone()),
        24,
        3,
    );
    let evolve = |f: &Vec<f64>| -> f64 {
        let evolved = expm_apply(&a_h, 0.2, f).unwrap();
        phi.apply(&evolved)
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    };
    let mut group = c.benchmark_group("family_evolution");
    group.bench_function(BenchmarkId::new("margins", "parallel"), |b| {
        b.iter(|| par::map_slice(&family, evolve))
    });
    group.bench_function(BenchmarkId::new("margins", "serial"), |b| {
        b.iter(|| par::map_slice_serial(&family, evolve))
    });
    group.finish();
}

fn bench_gillespie(c: &mut Criterion) {
    let sys = SpinSystem::path(64, RateRule::Contact { lambda: 1.2 }).unwrap();
    let sigma0 = vec![false; 64];
    let mut group = c.benchmark_group("gillespie");
    let paths = 2_000;
    group.bench_function(BenchmarkId::new("paths", "parallel"), |b| {
        b.iter(|| gillespie(&sys, &sigma0, 0.5, 11, paths, &[]))
    });
    #[cfg(feature = "parallel")]
    {
        let pool = single_thread_pool();
        group.bench_function(BenchmarkId::new("paths", "serial"), |b| {
            b.iter(|| pool.install(|| gillespie(&sys, &sigma0, 0.5, 11, paths, &[])))
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_simulate_ctmc,
    bench_family_evolution,
    bench_gillespie
);
criterion_main!(benches);
