use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use reprosv_core::autograd::Tape;
use reprosv_core::features::{Fbank, FbankConfig};
use reprosv_core::models::{BlackBoxEmbedder, BackboneConfig};
use reprosv_core::reprogram::{pad_raw, PaddingParams};
use reprosv_core::train::{compute_eer, SpeakerModel};

fn waveform(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-0.5..0.5)).collect()
}

fn fbank(c: &mut Criterion) {
    let fb = Fbank::new(FbankConfig::default()).unwrap();
    let x = waveform(16_000, 1);
    c.bench_function("fbank_compute_1s", |b| b.iter(|| fb.compute(black_box(&x)).unwrap()));
    c.bench_function("fbank_forward_backward_1s", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let xv = t.param(vec![x.len()], x.clone()).unwrap();
            let f = fb.forward(&mut t, xv).unwrap();
            let loss = t.mean(f);
            t.backward(loss).unwrap()
        })
    });
}

fn padding_backward(c: &mut Criterion) {
    let x = waveform(8000, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let padding = PaddingParams::new(800, 1, 1e-3, &mut rng).unwrap();
    c.bench_function("pad_raw_backward_8000_800", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let w = padding.bind(&mut t);
            let xv = t.vector(x.clone());
            let y = pad_raw(&mut t, xv, w).unwrap();
            let sq = t.mul(y, y).unwrap();
            let loss = t.sum(sq);
            t.backward(loss).unwrap()
        })
    });
}

fn matmul(c: &mut Criterion) {
    let a = waveform(128 * 256, 4);
    let bm = waveform(256 * 128, 5);
    c.bench_function("tape_matmul_128x256x128", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let av = t.param(vec![128, 256], a.clone()).unwrap();
            let bv = t.constant(vec![256, 128], bm.clone()).unwrap();
            let y = t.matmul(av, bv).unwrap();
            let loss = t.sum(y);
            t.backward(loss).unwrap()
        })
    });
}

fn embed(c: &mut Criterion) {
    let model = SpeakerModel::init(FbankConfig::default(), BackboneConfig::default(), 10, 6).unwrap();
    let x = waveform(16_000, 7);
    c.bench_function("embed_1s", |b| b.iter(|| model.embedder().embed(black_box(&x)).unwrap()));
}

fn eer(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tar: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..1.5)).collect();
    let non: Vec<f64> = (0..2000).map(|_| rng.random_range(-0.5..1.0)).collect();
    c.bench_function("compute_eer_3000", |b| {
        b.iter_batched(|| (tar.clone(), non.clone()), |(t, n)| compute_eer(&t, &n).unwrap(), BatchSize::SmallInput)
    });
}

criterion_group!(benches, fbank, padding_backward, matmul, embed, eer);
criterion_main!(benches);
