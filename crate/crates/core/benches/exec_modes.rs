use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mfgkit::exec::Exec;
use mfgkit::fixtures::{lq_coupled_2d, lq_scalar_benchmark};
use mfgkit::linalg::{vector, Mat};
use mfgkit::lq_model::solve_master_mfc;
use mfgkit::master_residual::{random_samples, residual_mfc};
use mfgkit::mckean_vlasov::{estimate_cost, optimal_feedback, simulate_particles, BrownianPath, MonteCarlo};
use mfgkit::riccati::TimeGrid;
use mfgkit::systemic_risk::{simulate_banks, solve_systemic, SystemicParams};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn particles(c: &mut Criterion) {
    let p = lq_coupled_2d();
    let grid = TimeGrid::horizon(1.0, 200).unwrap();
    let ans = solve_master_mfc(&p, &grid, &[1.0]).unwrap();
    let path = BrownianPath::sample(&grid, 2, 1, 0);
    let mut group = c.benchmark_group("particles_5000");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| simulate_particles(&ans, 5000, &vector(&[0.5, -0.5]), &Mat::identity(2, 2), &path, black_box(exec)).unwrap())
        });
    }
    group.finish();
}

fn cost(c: &mut Criterion) {
    let p = lq_scalar_benchmark();
    let ans = solve_master_mfc(&p, &TimeGrid::horizon(1.0, 200).unwrap(), &[1.0]).unwrap();
    let fb = optimal_feedback(&ans).unwrap();
    let mut group = c.benchmark_group("mc_cost_64x100");
    group.sample_size(10);
    for (name, exec) in MODES {
        let mc = MonteCarlo { particles: 100, replications: 64, steps: 200, seed: 1, exec };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| estimate_cost(&p, &fb, &vector(&[0.5]), &Mat::from_element(1, 1, 0.25), black_box(&mc)).unwrap())
        });
    }
    group.finish();
}

fn banks(c: &mut Criterion) {
    let params = SystemicParams { alpha: 1.0, lambda: 0.5, mu: 1.0, c: 0.3, sigma: 0.2, beta: 0.3, horizon: 1.0 };
    let sol = solve_systemic(&params, &TimeGrid::horizon(1.0, 100).unwrap()).unwrap();
    let x0: Vec<f64> = (0..20_000).map(|j| j as f64 / 20_000.0).collect();
    let mut group = c.benchmark_group("banks_20000");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| simulate_banks(&sol, &x0, 1, 0, black_box(exec)).unwrap()));
    }
    group.finish();
}

fn residuals(c: &mut Criterion) {
    let p = lq_coupled_2d();
    let ans = solve_master_mfc(&p, &TimeGrid::horizon(1.0, 1000).unwrap(), &[0.5, 1.0, 2.0]).unwrap();
    let samples = random_samples(2, 400, &[0.5, 1.0, 2.0], 1.0, 2.0, 1);
    // residual evaluation always uses the parallel policy; this tracks its cost
    c.bench_function("residual_mfc_400", |b| b.iter(|| residual_mfc(&ans, black_box(&samples)).unwrap()));
}

criterion_group!(benches, particles, cost, banks, residuals);
criterion_main!(benches);
