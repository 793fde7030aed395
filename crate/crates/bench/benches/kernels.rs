use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use polymer_core::dynamics::{sample_noise, simulate, simulate_recursion, solution_formula};
use polymer_core::gibbs::{metropolis_sampler, EnsembleConfig, MetropolisConfig};
use polymer_core::observables::{count_close_pairs, count_close_pairs_naive};
use polymer_core::spectral::{build_basis, transition_matrix_power};
use polymer_core::{Convention, PolymerModel};
use std::hint::black_box;

fn pair_counting(c: &mut Criterion) {
    let mut group = c.benchmark_group("pair_counting");
    for j in [64usize, 256, 1024] {
        let noise = sample_noise(1, 1, j, 0.0).unwrap();
        let heights: Vec<f64> = noise.row(0).iter().scan(0.0, |s, x| {
            *s += x;
            Some(*s)
        }).collect();
        group.bench_with_input(BenchmarkId::new("sorted", j), &heights, |b, h| {
            b.iter(|| count_close_pairs(black_box(h), 0.5))
        });
        group.bench_with_input(BenchmarkId::new("naive", j), &heights, |b, h| {
            b.iter(|| count_close_pairs_naive(black_box(h), 0.5))
        });
    }
    group.finish();
}

fn trajectories(c: &mut Criterion) {
    let (j, horizon) = (64, 512);
    let noise = sample_noise(2, horizon, j, 0.0).unwrap();
    let u0 = vec![0.0; j];
    let basis = build_basis(j).unwrap();
    let mut group = c.benchmark_group("trajectory_J64_T512");
    group.bench_function("recursion", |b| {
        b.iter(|| simulate_recursion(black_box(&u0), &noise, 0.5).unwrap())
    });
    let paper = PolymerModel::new(j, horizon).with_convention(Convention::Paper);
    group.bench_function("paper_fast_path", |b| {
        b.iter(|| simulate(&paper, black_box(&u0), &noise).unwrap())
    });
    group.sample_size(10);
    group.bench_function("closed_form", |b| {
        b.iter(|| solution_formula(black_box(&u0), &noise, &basis, Convention::Literal).unwrap())
    });
    group.finish();
}

fn green_function(c: &mut Criterion) {
    let basis = build_basis(64).unwrap();
    let mut group = c.benchmark_group("green_J64_t256");
    group.bench_function("spectral", |b| b.iter(|| basis.green_matrix(black_box(256), Convention::Literal)));
    group.bench_function("matrix_power", |b| b.iter(|| transition_matrix_power(64, black_box(256)).unwrap()));
    group.finish();
}

fn metropolis(c: &mut Criterion) {
    let model = PolymerModel::new(16, 64);
    let cfg = EnsembleConfig::new(model, 0.05, 0.5, 3);
    let mc = MetropolisConfig {
        burn_in: 10,
        thin: 1,
        ..MetropolisConfig::default()
    };
    let mut group = c.benchmark_group("metropolis_J16_T64");
    group.sample_size(10);
    group.bench_function("50_sweeps", |b| b.iter(|| metropolis_sampler(black_box(&cfg), &mc, 40).unwrap()));
    group.finish();
}

criterion_group!(benches, pair_counting, trajectories, green_function, metropolis);
criterion_main!(benches);
