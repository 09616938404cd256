use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tipcache::{blended_logits, loss_and_grad, mlp_form_logits, Unfreeze};
use tipcache_bench::fixture;

fn bench_inference(c: &mut Criterion) {
    let mut group = c.benchmark_group("inference");
    for &(classes, dim) in &[(10usize, 64usize), (100, 256)] {
        let (data, cache) = fixture(classes, 16, dim, 10);
        let id = format!("{classes}x16/d{dim}");
        group.bench_with_input(BenchmarkId::new("blended", &id), &(), |b, _| {
            b.iter(|| blended_logits(black_box(&data.test), &cache, &data.clf).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("mlp_form", &id), &(), |b, _| {
            b.iter(|| mlp_form_logits(black_box(&data.test), &cache, &data.clf).unwrap())
        });
    }
    group.finish();
}

fn bench_gradient(c: &mut Criterion) {
    let (data, cache) = fixture(10, 16, 64, 1);
    c.bench_function("loss_and_grad/keys/10x16/d64", |b| {
        b.iter(|| loss_and_grad(black_box(&data.train), &cache, &data.clf, Unfreeze::KEYS).unwrap())
    });
}

criterion_group!(benches, bench_inference, bench_gradient);
criterion_main!(benches);
