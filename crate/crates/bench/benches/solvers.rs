use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use softbellman_bench::{gridworld_instance, random_instance};
use softbellman_core::inverse::implicit_gradient;
use softbellman_core::{solve_forward, ForwardConfig};

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("solve_forward");
    group.sample_size(10);
    for players in [1, 2, 3] {
        let (stacked, params) = random_instance(players, 6, 4, 7);
        group.bench_with_input(BenchmarkId::new("random", players), &players, |b, _| {
            b.iter(|| solve_forward(&stacked, &params, None, &ForwardConfig::default()).unwrap())
        });
    }
    let (stacked, params) = gridworld_instance(3);
    group.bench_function("gridworld_3x3", |b| {
        b.iter(|| solve_forward(&stacked, &params, None, &ForwardConfig::default()).unwrap())
    });
    group.finish();
}

fn gradient(c: &mut Criterion) {
    let mut group = c.benchmark_group("implicit_gradient");
    group.sample_size(10);
    for players in [1, 3] {
        let (stacked, params) = random_instance(players, 6, 4, 11);
        let sol = solve_forward(&stacked, &params, None, &ForwardConfig::default()).unwrap();
        let y_hat = sol.y.map(|v| v * 1.01);
        group.bench_with_input(BenchmarkId::new("random", players), &players, |b, _| {
            b.iter(|| implicit_gradient(&stacked, &params, &sol.y, &y_hat).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, forward, gradient);
criterion_main!(benches);
