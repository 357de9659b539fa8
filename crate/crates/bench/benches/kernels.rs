use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use mcl_bench::{images, matrix};
use mcl_core::evaluation::{linear_probe, ProbeConfig};
use mcl_core::objective::symmetric_info_nce_with_grad;
use mcl_core::{init_encoder, kmeans, EncoderSpec, InitMode, KMeansParams, NegativeMask, TrainConfig};

fn info_nce(c: &mut Criterion) {
    let a = matrix(256, 64, 1);
    let b = matrix(256, 64, 2);
    let mask = NegativeMask::all_off_diagonal(256);
    c.bench_function("symmetric_info_nce_with_grad/256x64", |bench| {
        bench.iter(|| symmetric_info_nce_with_grad(black_box(&a), black_box(&b), &mask, 0.25).unwrap())
    });
}

fn clustering(c: &mut Criterion) {
    let x = matrix(5_000, 32, 3);
    c.bench_function("kmeans/5000x32/k5", |bench| {
        bench.iter(|| kmeans(black_box(&x), 5, KMeansParams::default(), 0).unwrap())
    });
}

fn encoder(c: &mut Criterion) {
    let spec = EncoderSpec {
        input_channels: 4,
        input_size: 16,
        conv_widths: vec![16, 32, 64],
        representation_dim: 64,
        projection_dim: 32,
        seed: 0,
    };
    let v1 = images(64, 4, 16, 4);
    let v2 = images(64, 4, 16, 5);
    let mask = NegativeMask::all_off_diagonal(64);
    let cfg = TrainConfig::default();
    let mut group = c.benchmark_group("encoder");
    group.sample_size(20);
    let state = init_encoder(&spec, &InitMode::Scratch, None).unwrap();
    group.bench_function("forward/64x4x16x16", |bench| bench.iter(|| state.forward(black_box(&v1)).unwrap()));
    let mut train = state.clone();
    group.bench_function("train_step/64x4x16x16", |bench| {
        bench.iter(|| train.train_step(black_box(&v1), black_box(&v2), &mask, &cfg, 0).unwrap())
    });
    group.finish();
}

fn probe(c: &mut Criterion) {
    let x = matrix(2_000, 64, 6);
    let labels: Vec<usize> = (0..2_000).map(|i| i % 10).collect();
    let cfg = ProbeConfig {
        epochs: 100,
        seeds: vec![0],
        ..ProbeConfig::default()
    };
    let mut group = c.benchmark_group("probe");
    group.sample_size(10);
    group.bench_function("linear_probe/2000x64/100ep", |bench| {
        bench.iter(|| linear_probe(black_box(&x), &labels, "f", "bench", &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(benches, info_nce, clustering, encoder, probe);
criterion_main!(benches);
