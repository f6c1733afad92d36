use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seco::autodiff::{Conv2dOpts, Tape, Tensor};
use seco::bsseval;
use seco::dsp::{self, Waveform};
use seco::networks::{ModelConfig, SeCoModel};
use seco::pipeline::SpectrogramConfig;
use seco::synthdata::{generate, SynthConfig};
use seco::trainer::{TrainConfig, Trainer};

fn noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn stft_istft(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w = Waveform::new(noise(&mut rng, 6 * 8000), 8000).unwrap();
    let spec = SpectrogramConfig::default();
    c.bench_function("stft 6 s", |b| b.iter(|| dsp::stft(black_box(&w), spec.window_size, spec.hop).unwrap()));
    let s = dsp::stft(&w, spec.window_size, spec.hop).unwrap();
    c.bench_function("istft 6 s", |b| b.iter(|| dsp::istft(black_box(&s)).unwrap()));
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::new([8, 16, 32, 32], noise(&mut rng, 8 * 16 * 32 * 32)).unwrap();
    let w = Tensor::new([16, 16, 3, 3], noise(&mut rng, 16 * 16 * 9)).unwrap();
    c.bench_function("conv2d 8x16x32x32 forward+backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let (xv, wv) = (tape.var(x.clone()), tape.var(w.clone()));
            let y = tape.conv2d(xv, wv, None, Conv2dOpts::new(1, 1)).unwrap();
            let l = tape.sum(y);
            tape.backward(l).unwrap()
        })
    });
}

fn training_step(c: &mut Criterion) {
    let ds = generate(&SynthConfig {
        clip_seconds: 2.0,
        clips_per_category: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let model_cfg = ModelConfig {
        grid: 32,
        residual_blocks: 4,
        consistency_width: 8,
        downsample_blocks: vec![0, 2],
        ..ModelConfig::default()
    };
    let mut group = c.benchmark_group("training step");
    group.sample_size(10);
    for lambda in [0.0, 0.01] {
        let model = SeCoModel::new(&model_cfg, 0).unwrap();
        let cfg = TrainConfig {
            lambda,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(model, cfg, SpectrogramConfig::default(), &ds).unwrap();
        group.bench_function(format!("batch 8, lambda {lambda}"), |b| b.iter(|| trainer.train_step().unwrap()));
    }
    group.finish();
}

fn bss(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 6 * 8000;
    let refs = [
        Waveform::new(noise(&mut rng, n), 8000).unwrap(),
        Waveform::new(noise(&mut rng, n), 8000).unwrap(),
    ];
    let est = [
        Waveform::new(noise(&mut rng, n), 8000).unwrap(),
        Waveform::new(noise(&mut rng, n), 8000).unwrap(),
    ];
    let mut group = c.benchmark_group("bss-eval");
    group.sample_size(10);
    group.bench_function("pair of 6 s estimates, filter 512, permuted", |b| {
        b.iter(|| bsseval::evaluate_pair(black_box(&est), &refs, true, bsseval::DEFAULT_FILTER_LEN).unwrap())
    });
    group.finish();
}

criterion_group!(benches, stft_istft, conv, training_step, bss);
criterion_main!(benches);
