use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use fvlayer::fisher::{fv_backward_params, fv_forward};
use fvlayer::par::{map_ordered, map_sequential, Workers};
use fvlayer::pipeline::bench::random_problem;

fn batch(c: &mut Criterion) {
    let (gmm, sets) = random_problem(1000, 32, 64, 24, 1).unwrap();
    let upstream = vec![1.0; gmm.fv_len()];
    let threads = Workers::available().0.max(2);

    let mut g = c.benchmark_group("fv_forward_batch");
    g.sample_size(10);
    g.bench_function("sequential", |b| {
        b.iter(|| map_sequential(black_box(&sets), |_, x| fv_forward(x, &gmm).unwrap().0))
    });
    g.bench_with_input(BenchmarkId::new("parallel", threads), &threads, |b, &n| {
        b.iter(|| map_ordered(Workers(n), black_box(&sets), |_, x| fv_forward(x, &gmm).unwrap().0))
    });
    g.finish();

    let forward: Vec<_> = sets.iter().map(|x| fv_forward(x, &gmm).unwrap().1).collect();
    let mut g = c.benchmark_group("fv_backward_params_batch");
    g.sample_size(10);
    g.bench_function("sequential", |b| {
        b.iter(|| map_sequential(black_box(&sets), |i, x| fv_backward_params(x, &gmm, &forward[i], &upstream).unwrap()))
    });
    g.bench_with_input(BenchmarkId::new("parallel", threads), &threads, |b, &n| {
        b.iter(|| {
            map_ordered(Workers(n), black_box(&sets), |i, x| fv_backward_params(x, &gmm, &forward[i], &upstream).unwrap())
        })
    });
    g.finish();
}

criterion_group!(benches, batch);
criterion_main!(benches);
