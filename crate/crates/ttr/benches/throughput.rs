//! Throughput of the evaluation fan-out: sequential path (parallelism 1)
//! against the rayon pool, plus the augmentation sampler alone.
//!
//! With `--no-default-features` the crate compiles without rayon and both
//! evaluation benches exercise the sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use ttr::adapt::{AdaptationConfig, Strategy};
use ttr::augment::{sample_augmentations, AugmentationPolicy};
use ttr::data::{corrupt, generate_synthetic, CorruptionKind, CorruptionSpec, Split};
use ttr::eval::evaluate;
use ttr::nn::{Model, ModelConfig, TrainConfig};

struct Fixture {
    model: Model<f32>,
    shifted: ttr::data::Dataset,
    policy: AugmentationPolicy,
}

fn fixture() -> Fixture {
    let mcfg = ModelConfig {
        arch: ttr::nn::ArchKind::ConvSmall,
        input: [1, 16, 16],
        num_classes: 3,
        conv_channels: vec![4, 8],
        hidden: vec![],
    };
    let mut model = Model::<f32>::init(&mcfg, 3).unwrap();
    let train = generate_synthetic(3, 40, 16, 11).unwrap();
    let tc = TrainConfig { epochs: 2, seed: 3, ..Default::default() };
    ttr::nn::train_supervised(&mut model, &train, None, &tc).unwrap();
    let mut test = generate_synthetic(3, 8, 16, 12).unwrap();
    test.split = Split::TestClean;
    let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise, 3, 5).unwrap();
    let shifted = corrupt(&test, &spec).unwrap();
    Fixture { model, shifted, policy: AugmentationPolicy::default() }
}

fn bench_evaluate(c: &mut Criterion) {
    let fx = fixture();
    let cfg = AdaptationConfig { strategy: Strategy::Memo, b: 8, eta: 0.005, ..Default::default() };
    let mut group = c.benchmark_group("evaluate_memo");
    group.sample_size(10);
    for &threads in &[1usize, 4] {
        group.bench_with_input(BenchmarkId::new("parallelism", threads), &threads, |b, &t| {
            b.iter(|| {
                black_box(
                    evaluate(&fx.model, &fx.shifted, &cfg, &fx.policy, 7, t).unwrap().error_pct,
                )
            })
        });
    }
    group.finish();

    let mut group = c.benchmark_group("evaluate_tta");
    group.sample_size(10);
    let tta = AdaptationConfig { strategy: Strategy::Tta, b: 8, ..Default::default() };
    for &threads in &[1usize, 4] {
        group.bench_with_input(BenchmarkId::new("parallelism", threads), &threads, |b, &t| {
            b.iter(|| {
                black_box(
                    evaluate(&fx.model, &fx.shifted, &tta, &fx.policy, 7, t).unwrap().error_pct,
                )
            })
        });
    }
    group.finish();
}

fn bench_augment(c: &mut Criterion) {
    let fx = fixture();
    let x = &fx.shifted.images[0];
    let mut group = c.benchmark_group("sample_augmentations");
    for &b in &[8usize, 32] {
        group.bench_with_input(BenchmarkId::new("B", b), &b, |bench, &bb| {
            bench.iter(|| black_box(sample_augmentations(x, bb, &fx.policy, 9).unwrap().len()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_evaluate, bench_augment);
criterion_main!(benches);
