use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use forgetbench::attack::{epsilon_vector, per_example_epsilon, EpsilonConfig, StatMatrix, World};
use rand::Rng;

fn row(g: &mut impl Rng, n: usize, shift: f64) -> Vec<f64> {
    (0..n).map(|_| g.random_range(-1.0..1.0) + shift).collect()
}

fn single_row(c: &mut Criterion) {
    let cfg = EpsilonConfig::default();
    let mut group = c.benchmark_group("per_example_epsilon");
    for n in [16usize, 64, 256, 512] {
        let mut g = forgetbench::rng::stream(1, "bench");
        let u = row(&mut g, n, 0.2);
        let r = row(&mut g, n, 0.0);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| per_example_epsilon(&u, &r, &cfg).unwrap())
        });
    }
    group.finish();
}

fn full_matrix(c: &mut Criterion) {
    let cfg = EpsilonConfig::default();
    let mut g = forgetbench::rng::stream(2, "bench");
    let rows = |g: &mut _, shift| (0..40).map(|_| row(g, 64, shift)).collect::<Vec<_>>();
    let u = StatMatrix::from_rows(World::Unlearned, rows(&mut g, 0.1)).unwrap();
    let r = StatMatrix::from_rows(World::Retrained, rows(&mut g, 0.0)).unwrap();
    c.bench_function("epsilon_vector 40x64", |b| b.iter(|| epsilon_vector(&u, &r, &cfg).unwrap()));
}

criterion_group!(benches, single_row, full_matrix);
criterion_main!(benches);
