use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use nonlocal_ramsey::calculus::{Calculus, Field};
use nonlocal_ramsey::control::{BoxBounds, ControlTrajectory};
use nonlocal_ramsey::geometry::{build_grid, Domain};
use nonlocal_ramsey::kernel::{KernelParams, Radius};
use nonlocal_ramsey::model::{ModelParams, ProductivityData, Profile};
use nonlocal_ramsey::solver::{SolverOptions, StateProblem};

fn calculus() -> Calculus {
    let d = Domain::rectangle([0.0, 0.0], [1.0, 1.0], 0.1).unwrap();
    let g = build_grid(&d, 0.02).unwrap();
    Calculus::new(g, KernelParams::new(2, 0.05, 0.1, 0.05).unwrap()).unwrap()
}

/// Single-worker pool for the sequential baseline. `None` runs on the
/// default pool (or inline when the `parallel` feature is off).
#[cfg(feature = "parallel")]
type Pool = Option<rayon::ThreadPool>;
#[cfg(not(feature = "parallel"))]
type Pool = Option<()>;

fn pools() -> Vec<(&'static str, Pool)> {
    #[cfg(feature = "parallel")]
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    #[cfg(not(feature = "parallel"))]
    let single = ();
    vec![("sequential", Some(single)), ("parallel", None)]
}

fn on_pool<T: Send>(pool: &Pool, f: impl FnOnce() -> T + Send) -> T {
    #[cfg(feature = "parallel")]
    if let Some(p) = pool {
        return p.install(f);
    }
    #[cfg(not(feature = "parallel"))]
    let _ = pool;
    f()
}

fn bench_operators(c: &mut Criterion) {
    let calc = calculus();
    let pools = pools();
    let grid = calc.grid().clone();
    let u = Field::constrained(&grid, |x| (x[0] * 3.0).sin() * x[1]);
    let mut group = c.benchmark_group("nl_diffusion");
    for (name, pool) in &pools {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| on_pool(pool, || calc.nl_diffusion(&u, Radius::Epsilon).unwrap()))
        });
    }
    group.finish();

    let data = ProductivityData::from_profiles(&grid, Profile::Constant(1.0), Profile::Constant(0.0)).unwrap();
    let problem = StateProblem::new(calc.clone(), ModelParams::default(), data, 10, SolverOptions::default()).unwrap();
    let k0 = Field::constrained(&grid, |_| 1.0);
    let control = ControlTrajectory::constant(10, grid.interior_count(), 0.1, BoxBounds::unbounded());
    let mut group = c.benchmark_group("picard_solve");
    group.sample_size(10);
    for (name, pool) in &pools {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| on_pool(pool, || problem.picard_solve(&k0, &control).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_operators);
criterion_main!(benches);
