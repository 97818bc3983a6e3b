//! Criterion benchmarks for the hot kernels: convolution, window attention,
//! forward noising, and a whole denoiser forward pass.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use voxdiff_core::model::attention::WindowAttention;
use voxdiff_core::model::{SwinConfig, SwinVnet};
use voxdiff_core::tensor::no_grad;
use voxdiff_core::{NoiseSchedule, Tensor};

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn bench_conv3d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::constant(&[8, 16, 16, 4], randn(&mut rng, 8 * 16 * 16 * 4)).unwrap();
    let w = Tensor::constant(&[8, 8, 3, 3, 3], randn(&mut rng, 8 * 8 * 27)).unwrap();
    let b = Tensor::constant(&[8], randn(&mut rng, 8)).unwrap();
    c.bench_function("conv3d 8ch 16x16x4 k3", |bench| {
        bench.iter(|| no_grad(|| x.conv3d(&w, &b)).unwrap())
    });
}

fn bench_window_attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let att = WindowAttention::new(16, 2, &mut rng).unwrap();
    let x = Tensor::constant(&[16, 16, 16, 4], randn(&mut rng, 16 * 16 * 16 * 4)).unwrap();
    c.bench_function("window attention 16ch 16x16x4 win 4x4x2", |bench| {
        bench.iter(|| no_grad(|| att.forward(&x, [4, 4, 2], [2, 2, 1])).unwrap())
    });
}

fn bench_q_sample(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sched = NoiseSchedule::linear(1000, 5e-6).unwrap();
    let x0 = randn(&mut rng, 64 * 64 * 16);
    let eps = randn(&mut rng, 64 * 64 * 16);
    c.bench_function("q_sample 64x64x16", |bench| {
        bench.iter(|| sched.q_sample(&x0, 500, &eps).unwrap())
    });
}

fn bench_model_forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = SwinVnet::new(SwinConfig::toy(), 7).unwrap();
    let x = Tensor::constant(&[1, 16, 16, 4], randn(&mut rng, 1024)).unwrap();
    let cond = Tensor::constant(&[1, 16, 16, 4], randn(&mut rng, 1024)).unwrap();
    let mut group = c.benchmark_group("denoiser");
    group.sample_size(20);
    group.bench_function("toy forward 16x16x4", |bench| {
        bench.iter(|| no_grad(|| model.forward(&x, &cond, 500)).unwrap())
    });
    group.finish();
}

criterion_group!(
    kernels,
    bench_conv3d,
    bench_window_attention,
    bench_q_sample,
    bench_model_forward
);
criterion_main!(kernels);
