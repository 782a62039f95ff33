use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use qat_core::data::{make_synthetic, Split};
use qat_core::harness::{Trainer, TrainConfig};
use qat_core::metrics::compute_tr;
use qat_core::quant::{quantize_forward, QuantizedParam, QuantizerSpec};
use qat_core::schedule::{TrController, UpdateRule};
use qat_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 1 << 16;

fn latents(seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec((0..N).map(|_| rng.random_range(-1.0f32..1.0)).collect())
}

fn quantizer(c: &mut Criterion) {
    let spec = QuantizerSpec::weight(2, 0.5).unwrap();
    let w = latents(0);
    c.bench_function("quantize_forward_64k", |b| b.iter(|| quantize_forward(black_box(&w), &spec).unwrap()));

    let mut p = QuantizedParam::new(w.clone(), spec).unwrap();
    let nudged = latents(1);
    c.bench_function("refresh_64k", |b| {
        b.iter(|| {
            p.latent = nudged.clone();
            black_box(p.refresh().unwrap())
        })
    });
}

fn transitions(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a: Vec<i32> = (0..N).map(|_| rng.random_range(-2..2)).collect();
    let b: Vec<i32> = a.iter().map(|&x| if rng.random_range(0..100) == 0 { x + 1 } else { x }).collect();
    c.bench_function("compute_tr_64k", |bch| bch.iter(|| compute_tr(black_box(&a), black_box(&b)).unwrap()));

    let mut ctl = TrController::new("bench", 0.01, 0.01, UpdateRule::Additive, 0.99).unwrap();
    c.bench_function("controller_observe", |bch| bch.iter(|| ctl.observe(black_box(0.004), 0.007).unwrap()));
}

fn train_step(c: &mut Criterion) {
    for tr in [false, true] {
        let cfg = TrainConfig {
            tr_enabled: tr,
            steps: Some(1_000_000),
            ..Default::default()
        };
        let train = make_synthetic(10, 64, 64, 0, Split::Train).unwrap();
        let test = make_synthetic(10, 4, 64, 0, Split::Test).unwrap();
        let mut trainer = Trainer::<f32>::new(cfg, train, test).unwrap();
        let name = if tr { "cnn_small_step_tr" } else { "cnn_small_step_plain" };
        c.bench_function(name, |b| b.iter(|| trainer.step().unwrap()));
    }
}

criterion_group!(benches, quantizer, transitions, train_step);
criterion_main!(benches);
