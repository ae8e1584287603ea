//! Parallel-vs-sequential throughput on the bootstrap hot path.
//!
//! Both variants run the same replicate closure through a rayon pool; the
//! sequential baseline uses a one-thread pool so the comparison isolates
//! scheduling overhead and scaling rather than code differences.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use drband::data::Dataset;
use drband::rng;
use drband::sieve::SieveConfig;
use drband::weights::{bootstrap_weights, draw_multipliers};
use rand::Rng;
use std::hint::black_box;

fn synthetic(n: usize, seed: u64) -> Dataset {
    let mut rng = rng::master(seed);
    let t: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| vec![rng.random::<f64>(), rng.random::<f64>()])
        .collect();
    let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    Dataset::new(y, t, x).unwrap()
}

fn replicate_sweep(ds: &Dataset, cfg: &SieveConfig, draws: &[Vec<f64>], pool: &rayon::ThreadPool) {
    pool.install(|| {
        use rayon::prelude::*;
        let sums: Vec<f64> = draws
            .par_iter()
            .map(|xi| {
                let ws = bootstrap_weights(ds, cfg, xi).unwrap();
                ws.values.iter().sum()
            })
            .collect();
        black_box(sums);
    });
}

fn bench_bootstrap(c: &mut Criterion) {
    let ds = synthetic(400, 7);
    let cfg = SieveConfig::new(2, 1);
    let draws = draw_multipliers(ds.n(), 200, 11);
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let full = rayon::ThreadPoolBuilder::new().build().unwrap();

    let mut group = c.benchmark_group("bootstrap_weights_b200");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("threads", 1), |b| {
        b.iter(|| replicate_sweep(&ds, &cfg, &draws, &single))
    });
    group.bench_function(BenchmarkId::new("threads", "default"), |b| {
        b.iter(|| replicate_sweep(&ds, &cfg, &draws, &full))
    });
    group.finish();
}

criterion_group!(benches, bench_bootstrap);
criterion_main!(benches);
