use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use bpvae::audio::{istft, lps, stft, Waveform, DEFAULT_FRAME_LEN, DEFAULT_HOP_LEN, DEFAULT_POWER_FLOOR};
use bpvae::checkpoint::Normalization;
use bpvae::gaussian::{kl, DiagonalGaussian};
use bpvae::metrics::{si_sdr, stoi};
use bpvae::networks::GaussianBatch;
use bpvae::training::{init_model, nsvae_batch_grad, vae_batch_grad, ArchConfig, NoisyObjective, Stage, TrainConfig};

fn noise(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn matrix(seed: u64, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_vec((r, c), noise(seed, r * c).iter().map(|v| v * 10.0).collect()).unwrap()
}

fn desk_cfg(stage: Stage) -> TrainConfig {
    TrainConfig {
        arch: ArchConfig {
            latent_dim: 16,
            encoder_channels: vec![8, 16, 16, 16],
            decoder_channels: vec![16, 16, 16, 8],
            ..ArchConfig::default()
        },
        ..TrainConfig::for_stage(stage)
    }
}

fn audio(c: &mut Criterion) {
    let w = Waveform::new(noise(1, 32_000), 16_000).unwrap();
    let e = Waveform::new(noise(2, 32_000), 16_000).unwrap();
    c.bench_function("stft_2s", |b| b.iter(|| stft(black_box(&w), DEFAULT_FRAME_LEN, DEFAULT_HOP_LEN).unwrap()));
    let spec = stft(&w, DEFAULT_FRAME_LEN, DEFAULT_HOP_LEN).unwrap();
    c.bench_function("istft_2s", |b| b.iter(|| istft(black_box(&spec)).unwrap()));
    c.bench_function("lps_2s", |b| b.iter(|| lps(black_box(&spec), DEFAULT_POWER_FLOOR).unwrap()));
    c.bench_function("si_sdr_2s", |b| b.iter(|| si_sdr(black_box(&w), black_box(&e)).unwrap()));
    c.bench_function("stoi_2s", |b| b.iter(|| stoi(black_box(&w), black_box(&e)).unwrap()));
}

fn losses(c: &mut Criterion) {
    let p = DiagonalGaussian::new(noise(3, 128), noise(4, 128)).unwrap();
    let q = DiagonalGaussian::new(noise(5, 128), noise(6, 128)).unwrap();
    c.bench_function("kl_l128", |b| b.iter(|| kl(black_box(&p), black_box(&q)).unwrap()));
}

fn training_steps(c: &mut Criterion) {
    let cfg = desk_cfg(Stage::Cvae);
    let model = init_model(&cfg, Normalization::identity(257)).unwrap();
    let x = matrix(7, 128, 257);
    let eps = matrix(8, 128, 16);
    c.bench_function("vae_batch_grad_b128", |b| {
        b.iter(|| vae_batch_grad(black_box(&model), x.view(), &eps, 1.0).unwrap())
    });
    let teacher = || GaussianBatch {
        mean: matrix(9, 128, 16),
        log_var: matrix(10, 128, 16) * 0.1,
    };
    let (ts, tn) = (teacher(), teacher());
    for (name, alpha) in [("nsvae_batch_grad_gamma1_b128", 1.0), ("nsvae_batch_grad_gamma_inf_b128", 0.0)] {
        let cfg = TrainConfig {
            alpha,
            ..desk_cfg(Stage::Nsvae)
        };
        let model = init_model(&cfg, Normalization::identity(257)).unwrap();
        let obj = NoisyObjective::from_config(&cfg);
        c.bench_function(name, |b| {
            b.iter_batched(
                || model.clone(),
                |m| nsvae_batch_grad(&m, x.view(), (&ts, &tn), None, obj).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = audio, losses, training_steps
}
criterion_main!(benches);
