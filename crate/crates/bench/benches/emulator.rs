use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mechemu_bench::fixture;
use mechemu_core::emulator::kalman;
use mechemu_core::likelihood::LikelihoodContext;
use mechemu_core::Emulator;

const SIZES: [usize; 3] = [32, 64, 128];

fn conditioning(c: &mut Criterion) {
    let mut group = c.benchmark_group("conditioning");
    group.sample_size(10);
    for n in SIZES {
        let f = fixture(n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &f, |b, f| {
            b.iter(|| Emulator::build(&f.design, &f.model, f.aux).unwrap())
        });
    }
    group.finish();
}

fn emulation(c: &mut Criterion) {
    let mut group = c.benchmark_group("emulation");
    group.sample_size(10);
    for n in SIZES {
        let f = fixture(n);
        group.bench_with_input(BenchmarkId::new("joint", n), &f, |b, f| {
            b.iter(|| kalman::condition(&f.design, &f.model, &f.aux, black_box(&f.query)).unwrap())
        });
        let emulator = Emulator::build(&f.design, &f.model, f.aux).unwrap();
        group.bench_with_input(BenchmarkId::new("fast", n), &f, |b, f| {
            b.iter(|| emulator.predict(black_box(&f.query)).unwrap())
        });
    }
    group.finish();
}

fn likelihood(c: &mut Criterion) {
    let f = fixture(32);
    let context = LikelihoodContext::new(f.observed.clone(), 0.35).unwrap();
    let model: Vec<f64> = f.observed.values().iter().map(|v| v * 1.05).collect();
    c.bench_function("log_likelihood", |b| {
        b.iter(|| context.log_likelihood(black_box(&model), 0.05, 0.1, 3600.0))
    });
}

criterion_group!(benches, conditioning, emulation, likelihood);
criterion_main!(benches);
