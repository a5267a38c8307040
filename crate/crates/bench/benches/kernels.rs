use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lmd_core::mae::{LatentMae, MaeConfig, MaeMode};
use lmd_core::numerics::kernels::gemm;
use lmd_core::numerics::{Graph, Tensor};
use lmd_core::projector::{Codebook, LatentImage};
use lmd_core::schedule::MaskPlan;
use lmd_core::trainer::mix_seed;
use std::hint::black_box;

fn filled(shape: Vec<usize>, seed: u64) -> Tensor {
    Tensor::from_fn(shape, |i| ((mix_seed(&[seed, i as u64]) % 2001) as f64 / 1000.0) - 1.0)
}

fn bench_gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm");
    for n in [16usize, 64, 128] {
        let a = filled(vec![n, n], 1);
        let b = filled(vec![n, n], 2);
        let mut out = vec![0.0; n * n];
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, &n| {
            bch.iter(|| gemm(n, n, n, a.data(), false, b.data(), false, 0.0, black_box(&mut out)))
        });
    }
    group.finish();
}

fn bench_conv(c: &mut Criterion) {
    let x = filled(vec![4, 16, 32, 32], 3);
    let w = filled(vec![16, 16, 3, 3], 4);
    c.bench_function("conv2d_fwd_bwd_4x16x32x32", |b| {
        b.iter(|| {
            let g = Graph::new();
            let xv = g.param(x.clone());
            let y = xv.conv2d(g.param(w.clone()), 1, 1).unwrap().sum();
            black_box(g.backward(y).unwrap());
        })
    });
}

fn bench_quantize(c: &mut Criterion) {
    let cb = Codebook::new(filled(vec![512, 4], 5)).unwrap();
    let z = LatentImage::new(filled(vec![28, 28, 4], 6), (224, 224)).unwrap();
    c.bench_function("quantize_28x28_k512", |b| {
        b.iter(|| black_box(lmd_core::projector::quantize(&z, &cb).unwrap()))
    });
}

fn bench_lsmd_step(c: &mut Criterion) {
    let cfg = MaeConfig {
        patch_size: 1,
        d_model: 32,
        d_decoder: 64,
        encoder_blocks: 2,
        decoder_blocks: 3,
        heads: 4,
        mlp_ratio: 2,
        mode: MaeMode::Custom,
    };
    let mae = LatentMae::new(cfg, 4, 0).unwrap();
    let z = filled(vec![16, 4, 4, 4], 7);
    let mut group = c.benchmark_group("lsmd_step");
    for ratio in [0.15, 0.45, 0.75] {
        let plans: Vec<MaskPlan> = (0..16).map(|b| MaskPlan::random(16, ratio, b).unwrap()).collect();
        group.bench_with_input(BenchmarkId::from_parameter(ratio), &ratio, |b, _| {
            b.iter(|| {
                let g = Graph::new();
                let p = mae.params().bind(&g, true);
                let loss = mae.loss_graph(&g, &p, &z, &plans).unwrap();
                black_box(g.backward(loss).unwrap());
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_gemm, bench_conv, bench_quantize, bench_lsmd_step);
criterion_main!(benches);
