use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use cotlab_core::linalg::RngStream;
use cotlab_core::looped::{loop_grad_on, sample_covariances, LoopGradient};
use cotlab_core::model::{construct_multistep, forward_with_gram, init_random, Gram};
use cotlab_core::objectives::{grad_full_mc, grad_full_sample};
use cotlab_core::task::sample_task;
use cotlab_core::theory::{sample_s, WishartSampler};
use cotlab_core::{cot_rollout, LoopedParams, Matrix, McConfig};

fn forward(c: &mut Criterion) {
    let mut rng = RngStream::new(1);
    let mut g = c.benchmark_group("forward");
    for d in [5, 10, 20] {
        let task = sample_task(&mut rng, d, 2 * d);
        let params = init_random(&mut rng, d, 0.1);
        let gram = Gram::from_task(&task);
        let z = vec![0.3; 2 * d + 2];
        g.bench_with_input(BenchmarkId::new("with_gram", d), &d, |b, _| {
            b.iter(|| forward_with_gram(&params, &gram, black_box(&z)))
        });
        let gd = construct_multistep(d, 0.4);
        g.bench_with_input(BenchmarkId::new("rollout_k20", d), &d, |b, _| {
            b.iter(|| cot_rollout(black_box(&task), &gd, 20, 0.4).unwrap())
        });
    }
    g.finish();
}

fn gradients(c: &mut Criterion) {
    let mut rng = RngStream::new(2);
    let (d, n, k, eta) = (10, 20, 20, 0.4);
    let task = sample_task(&mut rng, d, n);
    let params = init_random(&mut rng, d, 0.1);
    c.bench_function("grad_full_sample_d10_k20", |b| b.iter(|| grad_full_sample(black_box(&task), &params, k, eta)));

    let cfg = McConfig {
        d,
        n,
        k,
        eta,
        batch: 256,
        antithetic: true,
    };
    let mut g = c.benchmark_group("grad_full_mc");
    g.sample_size(10);
    g.bench_function("batch256_d10_k20", |b| {
        b.iter(|| grad_full_mc(&params, &cfg, &mut RngStream::new(3)))
    });
    g.finish();
}

fn wishart_and_loop(c: &mut Criterion) {
    let mut g = c.benchmark_group("wishart");
    for sampler in [WishartSampler::Bartlett, WishartSampler::Direct] {
        g.bench_function(format!("{sampler:?}_d8_n1024"), |b| {
            let mut rng = RngStream::new(4);
            b.iter(|| sample_s(&mut rng, 8, 1024, sampler))
        });
    }
    g.finish();

    let d = 8;
    let covs = sample_covariances(&mut RngStream::new(5), d, 1024, 256, WishartSampler::Bartlett);
    let mut g = c.benchmark_group("loop_gradient_batch256");
    for loops in [1, 4] {
        let params = LoopedParams::new(Matrix::identity(d).scale(0.5), loops).unwrap();
        g.bench_with_input(BenchmarkId::new("exact", loops), &loops, |b, _| {
            b.iter(|| loop_grad_on(&params, black_box(&covs), LoopGradient::Exact))
        });
    }
    g.finish();
}

criterion_group!(benches, forward, gradients, wishart_and_loop);
criterion_main!(benches);
