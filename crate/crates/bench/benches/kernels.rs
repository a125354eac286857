use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use masm_core::harness::detection_batch;
use masm_core::metrics::{auc, average_precision, eer};
use masm_core::network::{backward, forward, GradScope};
use masm_core::slm::{build_mask, compute_bvg, update_stats, GradientStats, MaskPolicy};
use masm_core::subspace::decompose;
use masm_core::{
    data, svd, DecompositionConfig, LossWeights, Matrix, Model, Rng, ScoredSet, StatsConfig, TrainConfig,
};

fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

fn bench_svd(c: &mut Criterion) {
    let mut g = c.benchmark_group("svd");
    let mut rng = Rng::new(1);
    for n in [16, 32, 64, 128] {
        let w = gaussian(n, n, &mut rng);
        g.bench_with_input(BenchmarkId::from_parameter(n), &w, |b, w| b.iter(|| svd(black_box(w)).unwrap()));
    }
    g.finish();
}

fn bench_decompose(c: &mut Criterion) {
    let mut rng = Rng::new(2);
    let w = gaussian(64, 64, &mut rng);
    let cfg = DecompositionConfig::default();
    c.bench_function("decompose/64", |b| b.iter(|| decompose(black_box(&w), &cfg, 0).unwrap()));
}

fn bench_model(c: &mut Criterion) {
    let cfg = TrainConfig::default();
    let mut rng = Rng::new(3);
    let mut model = Model::init(cfg.model, &mut rng).unwrap();
    model.decompose_attention(&cfg.decomposition).unwrap();
    model.reset_binary_head(&mut rng);
    let splits = data::build_splits(&cfg.data, cfg.dims(), 0).unwrap();
    let idx: Vec<usize> = (0..cfg.optimizer.batch_size).collect();
    let batch = detection_batch(&splits.finetune_train, &idx);
    let weights = LossWeights::default();
    c.bench_function("forward/default_batch", |b| b.iter(|| forward(black_box(&model), &batch.inputs).unwrap()));
    c.bench_function("backward/default_batch", |b| {
        b.iter(|| backward(black_box(&model), &batch, &weights, GradScope::Trainable).unwrap())
    });
}

fn bench_slm(c: &mut Criterion) {
    let mut rng = Rng::new(4);
    let sizes = vec![500; 24];
    let grads: Vec<Vec<f64>> = sizes.iter().map(|&n| (0..n).map(|_| rng.normal()).collect()).collect();
    let stats_cfg = StatsConfig::default();
    let stats = update_stats(&GradientStats::new(&sizes), &grads, &stats_cfg).unwrap();
    let policy = MaskPolicy { m: 16, warmup_steps: 0, forced_off: vec![] };
    c.bench_function("slm/update_stats", |b| b.iter(|| update_stats(black_box(&stats), &grads, &stats_cfg).unwrap()));
    c.bench_function("slm/bvg_and_mask", |b| {
        b.iter(|| build_mask(&compute_bvg(black_box(&stats), &stats_cfg), 10, &policy))
    });
}

fn bench_metrics(c: &mut Criterion) {
    let mut g = c.benchmark_group("metrics");
    let mut rng = Rng::new(5);
    for n in [1_000, 10_000] {
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let scores: Vec<f64> = labels.iter().map(|&y| rng.normal() + y as f64).collect();
        let set = ScoredSet::new(scores, labels);
        g.bench_with_input(BenchmarkId::new("auc", n), &set, |b, s| b.iter(|| auc(black_box(s)).unwrap()));
        g.bench_with_input(BenchmarkId::new("ap", n), &set, |b, s| b.iter(|| average_precision(black_box(s)).unwrap()));
        g.bench_with_input(BenchmarkId::new("eer", n), &set, |b, s| b.iter(|| eer(black_box(s)).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, bench_svd, bench_decompose, bench_model, bench_slm, bench_metrics);
criterion_main!(benches);
