use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ratingbench::baselines::train_mf;
use ratingbench::metrics::{kendall_tau, spearman, welch_t_test};
use ratingbench::{MfHyper, RatingTriple};

fn ratings(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(1..=10) as f64).collect()
}

fn correlations(c: &mut Criterion) {
    let mut group = c.benchmark_group("correlation");
    for n in [100, 1000, 10_000] {
        let (x, y) = (ratings(n, 1), ratings(n, 2));
        group.bench_with_input(BenchmarkId::new("spearman", n), &n, |b, _| {
            b.iter(|| spearman(black_box(&x), black_box(&y)))
        });
        group.bench_with_input(BenchmarkId::new("kendall_tau", n), &n, |b, _| {
            b.iter(|| kendall_tau(black_box(&x), black_box(&y)))
        });
    }
    group.finish();
}

fn welch(c: &mut Criterion) {
    let (a, b) = (ratings(6, 3), ratings(6, 4));
    c.bench_function("welch_6_vs_6", |bench| bench.iter(|| welch_t_test(black_box(&a), black_box(&b))));
}

fn als(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let triples: Vec<RatingTriple> = (0..5000)
        .map(|_| RatingTriple {
            user_id: format!("u{}", rng.random_range(0..500)),
            item_id: format!("i{}", rng.random_range(0..800)),
            rating: rng.random_range(1..=10),
        })
        .collect();
    let hyper = MfHyper::default();
    c.bench_function("train_mf_5k_triples", |b| b.iter(|| train_mf(black_box(&triples), &hyper)));
}

criterion_group!(benches, correlations, welch, als);
criterion_main!(benches);
