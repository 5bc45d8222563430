use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hrm_core::tensor::gradcheck::random_tensor;
use hrm_core::tensor::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn inputs(shapes: &[&[usize]]) -> Vec<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    shapes.iter().map(|s| random_tensor(&mut rng, s).cast()).collect()
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64, 128, 256] {
        let t = inputs(&[&[n, n], &[n, n]]);
        group.bench_with_input(BenchmarkId::new("forward", n), &t, |b, t| {
            b.iter(|| {
                let mut g = Graph::<f32>::no_grad();
                let (x, y) = (g.constant(t[0].clone()), g.constant(t[1].clone()));
                black_box(g.matmul(x, y).unwrap());
            })
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", n), &t, |b, t| {
            b.iter(|| {
                let mut g = Graph::<f32>::new();
                let (x, y) = (g.param(t[0].clone()), g.param(t[1].clone()));
                let z = g.matmul(x, y).unwrap();
                let loss = g.sum(z).unwrap();
                g.backward(loss).unwrap();
                black_box(g.grad(x).is_some());
            })
        });
    }
    group.finish();
}

/// Batch 16 of 4×4 boards at hidden 64 with 4 heads.
fn block_kernels(c: &mut Criterion) {
    let (b, s, d, h) = (16, 16, 64, 4);
    let t = inputs(&[&[b, s, d], &[b, s, d], &[b, s, d]]);
    let mut group = c.benchmark_group("block_kernels");
    group.bench_function("attention_forward_backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::<f32>::new();
            let (q, k, v) = (g.param(t[0].clone()), g.param(t[1].clone()), g.param(t[2].clone()));
            let o = g.attention(q, k, v, h).unwrap();
            let loss = g.sum(o).unwrap();
            g.backward(loss).unwrap();
        })
    });
    group.bench_function("rms_norm_forward_backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::<f32>::new();
            let x = g.param(t[0].clone());
            let y = g.rms_norm(x, 1e-6).unwrap();
            let loss = g.sum(y).unwrap();
            g.backward(loss).unwrap();
        })
    });
    group.bench_function("softmax_forward_backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::<f32>::new();
            let x = g.param(t[0].clone());
            let y = g.softmax(x).unwrap();
            let loss = g.sum(y).unwrap();
            g.backward(loss).unwrap();
        })
    });
    group.finish();
}

criterion_group!(benches, matmul, block_kernels);
criterion_main!(benches);
