use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use pim_core::combiner::{gcn_fuse, GcnConfig, GcnWeights};
use pim_core::model::{forward, ModelConfig};
use pim_core::optim::{lion_step, LionConfig};
use pim_core::params::ParamStore;
use pim_core::selector::select;
use pim_core::{rng, Tape, Tensor};

/// Deterministic values in [-1, 1) without pulling in an RNG.
fn filled(shape: &[usize], salt: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n as u64)
        .map(|i| {
            let h = (i ^ salt).wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
            (h >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn conv(c: &mut Criterion) {
    let x = filled(&[4, 16, 32, 32], 1);
    let k = filled(&[32, 16, 3, 3], 2);
    c.bench_function("conv2d forward+backward 4x16x32x32 -> 32", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let (xv, kv) = (tape.leaf(x.clone()), tape.leaf(k.clone()));
            let y = xv.conv2d(kv, None, 1, 1).unwrap();
            black_box(tape.backward(y.sum_all()).unwrap());
        })
    });
}

fn selection(c: &mut Criterion) {
    let conf = filled(&[64, 64], 3);
    c.bench_function("select top 512 of 64x64", |b| {
        b.iter(|| black_box(select(&conf, 512).unwrap()))
    });
}

fn lion(c: &mut Criterion) {
    let n = 1 << 20;
    let mut w = filled(&[n], 4).into_data();
    let g = filled(&[n], 5).into_data();
    let mut m = vec![0.0; n];
    let cfg = LionConfig::default();
    c.bench_function("lion_step 1M parameters", |b| {
        b.iter(|| lion_step(black_box(&mut w), &g, &mut m, &cfg).unwrap())
    });
}

fn gcn(c: &mut Criterion) {
    let cfg = GcnConfig::default();
    let classes = 4;
    let mut store = ParamStore::new();
    cfg.init_params(classes, &mut store, &mut rng::stream(0, "bench"));
    let nodes = filled(&[240, classes], 6);
    c.bench_function("gcn_fuse 240 nodes", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let w = GcnWeights::bind(&bound, &cfg).unwrap();
            black_box(gcn_fuse(tape.leaf(nodes.clone()), &cfg, &w).unwrap().value().clone());
        })
    });
}

fn model_step(c: &mut Criterion) {
    let cfg = ModelConfig::toy(4, 64);
    let params = cfg.init_params(0).unwrap();
    let batch = filled(&[4, 1, 64, 64], 7);
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("toy forward+backward batch 4 at 64px", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let out = forward(&bound, tape.constant(batch.clone()), &cfg).unwrap();
            let (loss, _) = out.loss(&[0, 1, 2, 3], &Default::default()).unwrap();
            black_box(tape.backward(loss).unwrap());
        })
    });
    group.finish();
}

criterion_group!(benches, conv, selection, lion, gcn, model_step);
criterion_main!(benches);
