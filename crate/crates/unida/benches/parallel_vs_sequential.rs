//! Criterion benches comparing the rayon data-parallel kernels against the
//! sequential fallback on the workloads that dominate a training step.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::{Array2, Array4};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use unida::exec::ExecMode;
use unida::nn::kernels::{conv2d_backward, conv2d_forward, ConvSpec};
use unida::nn::models::{FeatureExtractor, StyleNetwork};
use unida::sdg::style_loss;
use unida::synth::{desk_spec, synthesize_dataset};

const MODES: [(&str, ExecMode); 2] = [
    ("sequential", ExecMode::Sequential),
    ("parallel", ExecMode::Parallel),
];

fn rand4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_fn(shape, |_| rng.gen_range(0.0..1.0))
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand4(&mut rng, (32, 32, 16, 16));
    let w = rand4(&mut rng, (64, 32, 3, 3));
    let spec = ConvSpec { kernel: 3, stride: 2, pad: 1 };
    let mut group = c.benchmark_group("conv2d_forward_b32_c32_16x16");
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| conv2d_forward(mode, &x.view(), &w.view(), None, spec));
        });
    }
    group.finish();

    let (y, cache) = conv2d_forward(ExecMode::Sequential, &x.view(), &w.view(), None, spec);
    let grad = y.mapv(|v| v * 0.1);
    let mut group = c.benchmark_group("conv2d_backward_b32_c32_16x16");
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| conv2d_backward(mode, &cache, &w.view(), &grad.view(), spec));
        });
    }
    group.finish();
}

fn bench_feature_batch(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let feature = FeatureExtractor::new(32, &mut rng);
    let x = rand4(&mut rng, (32, 3, 32, 32));
    let mut group = c.benchmark_group("feature_extractor_batch32");
    group.sample_size(20);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| feature.features(&x, mode));
        });
    }
    group.finish();
}

fn bench_style_loss(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let style = StyleNetwork::fixed();
    let a = rand4(&mut rng, (16, 3, 32, 32));
    let b2 = rand4(&mut rng, (16, 3, 32, 32));
    let mut group = c.benchmark_group("style_loss_batch16");
    group.sample_size(20);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| style_loss(&style, &a, &b2, mode));
        });
    }
    group.finish();
}

fn bench_synthesis(c: &mut Criterion) {
    let mut spec = desk_spec(5);
    spec.samples_per_class = 40;
    let mut group = c.benchmark_group("synthesize_dataset_40_per_class");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| synthesize_dataset(&spec, mode).unwrap());
        });
    }
    group.finish();
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = Array2::from_shape_fn((2048, 288), |_| rng.gen_range(-1.0..1.0));
    let b2 = Array2::from_shape_fn((288, 64), |_| rng.gen_range(-1.0..1.0));
    let mut group = c.benchmark_group("matmul_2048x288x64");
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| unida::exec::matmul(mode, a.view(), b2.view()));
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_conv,
    bench_feature_batch,
    bench_style_loss,
    bench_synthesis,
    bench_matmul
);
criterion_main!(benches);
