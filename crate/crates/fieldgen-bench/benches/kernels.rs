//! Tensor-kernel benchmarks: matmul, convolution, attention-sized softmax,
//! and a full desk-profile DiT forward pass.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use fieldgen_bench::randn;
use fieldgen_core::dit::{Dit, DitConfig};
use fieldgen_core::params::ParamStore;
use fieldgen_core::rng;
use fieldgen_core::tensor::Tape;

fn bench_matmul(c: &mut Criterion) {
    let a = randn(&[128, 128], 1);
    let b = randn(&[128, 128], 2);
    c.bench_function("matmul_128", |bch| {
        bch.iter(|| {
            let mut tape = Tape::<f32>::inference();
            let na = tape.constant(black_box(a.clone()));
            let nb = tape.constant(black_box(b.clone()));
            black_box(tape.matmul(na, nb).unwrap());
        })
    });
}

fn bench_conv2d(c: &mut Criterion) {
    let x = randn(&[32, 64, 64], 3);
    let w = randn(&[32, 32, 3, 3], 4);
    c.bench_function("conv2d_32x64x64_k3", |bch| {
        bch.iter(|| {
            let mut tape = Tape::<f32>::inference();
            let nx = tape.constant(black_box(x.clone()));
            let nw = tape.constant(black_box(w.clone()));
            black_box(tape.conv2d(nx, nw, 1, 1).unwrap());
        })
    });
}

fn bench_softmax(c: &mut Criterion) {
    let logits = randn(&[64, 64], 5);
    c.bench_function("softmax_64x64", |bch| {
        bch.iter(|| {
            let mut tape = Tape::<f32>::inference();
            let n = tape.constant(black_box(logits.clone()));
            black_box(tape.softmax_lastdim(n).unwrap());
        })
    });
}

fn bench_dit_forward(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let mut r = rng::stream(6, "bench-dit", &[]);
    let dit = Dit::init(&mut store, &mut r, DitConfig::desk()).unwrap();
    let z = randn(&[64, 8, 8], 7);
    let cond = randn(&[3, 128], 8);
    c.bench_function("dit_forward_desk", |bch| {
        bch.iter(|| {
            let mut tape = Tape::<f32>::inference();
            let bind = store.bind_all(&mut tape);
            let zn = tape.constant(black_box(z.clone()));
            let cn = tape.constant(black_box(cond.clone()));
            black_box(dit.forward(&mut tape, &bind, zn, 500, cn).unwrap());
        })
    });
}

criterion_group!(kernels, bench_matmul, bench_conv2d, bench_softmax, bench_dit_forward);
criterion_main!(kernels);
