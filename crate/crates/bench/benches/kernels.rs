//! Benchmarks for the linear algebra kernels and per-call compression path.

use compressense::approx::{compress, BoundLedger, CompressionConfig};
use compressense::linalg::{spectral_norm_default, truncated_svd};
use compressense_bench::{bench_id, random_matrix, random_vector};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn bench_spectral_norm(c: &mut Criterion) {
    let mut group = c.benchmark_group("spectral_norm");
    for &n in &[64usize, 256] {
        let m = random_matrix(n, n, 7);
        group.bench_with_input(BenchmarkId::from_parameter(n), &m, |b, m| {
            b.iter(|| spectral_norm_default(black_box(m)).unwrap().value)
        });
    }
    group.finish();
}

fn bench_truncated_svd(c: &mut Criterion) {
    let mut group = c.benchmark_group("truncated_svd_r16");
    for &(rows, cols) in &[(64usize, 64usize), (256, 64)] {
        let m = random_matrix(rows, cols, 11);
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{rows}x{cols}")),
            &m,
            |b, m| b.iter(|| truncated_svd(black_box(m), 16).unwrap().sigma_next),
        );
    }
    group.finish();
}

fn bench_compress(c: &mut Criterion) {
    let m = random_matrix(256, 64, 13);
    let cfg = CompressionConfig::new(0.05, 16, 0.0);
    c.bench_function("compress_256x64_k05_r16", |b| {
        b.iter(|| compress(bench_id(), black_box(&m), &cfg).unwrap().norm_r)
    });
}

fn bench_forward_living(c: &mut Criterion) {
    let m = random_matrix(256, 64, 17);
    let mut cfg = CompressionConfig::new(0.05, 16, 0.1);
    cfg.cache_capacity = 256;
    let a = compress(bench_id(), &m, &cfg).unwrap();
    let x = random_vector(64, 19);

    let mut group = c.benchmark_group("forward_living_256x64");
    group.bench_function("verified", |b| {
        let mut cache = a.new_cache();
        let mut ledger = BoundLedger::totals_only();
        b.iter(|| {
            a.forward_living(black_box(&x), &mut cache, Some(&mut ledger))
                .unwrap()
        })
    });
    group.bench_function("fast_mode", |b| {
        let mut cache = a.new_cache();
        b.iter(|| a.forward_living(black_box(&x), &mut cache, None).unwrap())
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_spectral_norm,
    bench_truncated_svd,
    bench_compress,
    bench_forward_living
);
criterion_main!(benches);
