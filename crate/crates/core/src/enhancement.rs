//! Mask-based enhancement. The noisy-speech encoder's two latents are fed
//! to the clean-speech and noise decoders; their LPS means form a ratio mask
//! on the noisy spectrogram, which is resynthesized with the noisy phase.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::{apply_mask, istft, lps, stft, Spectrogram, Waveform, DEFAULT_FRAME_LEN, DEFAULT_HOP_LEN, DEFAULT_POWER_FLOOR};
use crate::checkpoint::{load_kind, ModelKind, VaeModel};
use crate::error::{Error, Result};
use crate::gaussian::DiagonalGaussian;
use crate::networks::GaussianBatch;
use crate::training::{decode_chunked, encode_chunked};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum LatentMode {
    #[default]
    PosteriorMean,
    Sampled {
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnhancementConfig {
    pub latent_mode: LatentMode,
    /// Exponent on the power ratio; 0.5 gives the square-root ratio mask.
    pub mask_exponent: f64,
    pub mask_floor: f64,
    pub oracle: bool,
}

impl Default for EnhancementConfig {
    fn default() -> Self {
        Self {
            latent_mode: LatentMode::PosteriorMean,
            mask_exponent: 0.5,
            mask_floor: 0.0,
            oracle: false,
        }
    }
}

impl EnhancementConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_floor) {
            return Err(Error::invalid(format!("mask floor {} outside [0, 1]", self.mask_floor)));
        }
        if !(self.mask_exponent > 0.0) || !self.mask_exponent.is_finite() {
            return Err(Error::invalid("mask exponent must be positive"));
        }
        Ok(())
    }
}

/// `clamp((p_x / (p_x + p_d))^exponent, floor, 1)` per bin, from LPS
/// values.
pub fn estimate_mask(speech_lps_mean: &[f64], noise_lps_mean: &[f64], cfg: &EnhancementConfig) -> Vec<f64> {
    speech_lps_mean
        .iter()
        .zip(noise_lps_mean)
        .map(|(&lx, &ld)| {
            // p_x / (p_x + p_d) = 1 / (1 + exp(ld - lx)), stable for any LPS range
            let ratio = 1.0 / (1.0 + (ld - lx).exp());
            let m = ratio.powf(cfg.mask_exponent);
            if m.is_nan() {
                cfg.mask_floor
            } else {
                m.clamp(cfg.mask_floor, 1.0)
            }
        })
        .collect()
}

fn mask_matrix(speech: ArrayView2<'_, f64>, noise: ArrayView2<'_, f64>, cfg: &EnhancementConfig) -> Array2<f64> {
    let mut out = Array2::zeros(speech.dim());
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let m = estimate_mask(&speech.row(i).to_vec(), &noise.row(i).to_vec(), cfg);
        row.assign(&ndarray::aview1(&m));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl MaskStats {
    fn of(mask: &Array2<f64>) -> Self {
        Self {
            mean: mask.mean().unwrap_or(0.0),
            min: mask.iter().copied().fold(f64::INFINITY, f64::min),
            max: mask.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub num_frames: usize,
    pub oracle: bool,
    /// Input had zero energy and was returned unchanged.
    pub silent_input: bool,
    /// Some checkpoint in use was never trained.
    pub untrained_checkpoint: bool,
    pub mask: Option<MaskStats>,
    /// Oracle mode only: mean |mask - ideal ratio mask| with the same
    /// exponent and floor.
    pub irm_gap: Option<f64>,
    pub speech_posteriors: Vec<DiagonalGaussian>,
    pub noise_posteriors: Vec<DiagonalGaussian>,
}

/// The three models used at enhancement time, cross-checked on load.
#[derive(Debug, Clone)]
pub struct Enhancer {
    pub nsvae: Option<VaeModel>,
    pub cvae: VaeModel,
    pub nvae: VaeModel,
    untrained: bool,
}

impl Enhancer {
    pub fn new(nsvae: Option<VaeModel>, cvae: VaeModel, nvae: VaeModel) -> Result<Self> {
        let bad = |m: String| Err(Error::Config(format!("inconsistent models: {m}")));
        if cvae.kind != ModelKind::CleanVae || nvae.kind != ModelKind::NoiseVae {
            return bad("expected a clean-speech and a noise VAE".into());
        }
        if cvae.latent_dim() != nvae.latent_dim() || cvae.num_bins() != nvae.num_bins() {
            return bad("clean and noise VAEs differ in latent or frame size".into());
        }
        if let Some(ns) = &nsvae {
            if ns.kind != ModelKind::NoisyVae {
                return bad(format!("{:?} is not a noisy-speech VAE", ns.kind));
            }
            if ns.latent_dim() != cvae.latent_dim() || ns.num_bins() != cvae.num_bins() {
                return bad(format!(
                    "noisy-speech VAE uses L = {}, F = {}; teachers use L = {}, F = {}",
                    ns.latent_dim(),
                    ns.num_bins(),
                    cvae.latent_dim(),
                    cvae.num_bins()
                ));
            }
        }
        for m in [Some(&cvae), Some(&nvae), nsvae.as_ref()].into_iter().flatten() {
            if m.normalization.dim() != m.num_bins() {
                return bad("normalization size differs from frame size".into());
            }
        }
        Ok(Self {
            nsvae,
            cvae,
            nvae,
            untrained: false,
        })
    }

    /// Loads checkpoints; `nsvae` may be omitted for oracle-only use.
    pub fn load(nsvae: Option<&Path>, cvae: &Path, nvae: &Path) -> Result<Self> {
        let (c, cm) = load_kind(cvae, ModelKind::CleanVae)?;
        let (n, nm) = load_kind(nvae, ModelKind::NoiseVae)?;
        let mut untrained = cm.epochs_trained == 0 || nm.epochs_trained == 0;
        let ns = match nsvae {
            Some(p) => {
                let (m, meta) = load_kind(p, ModelKind::NoisyVae)?;
                untrained |= meta.epochs_trained == 0;
                Some(m)
            }
            None => None,
        };
        let mut e = Self::new(ns, c, n)?;
        e.untrained = untrained;
        Ok(e)
    }

    fn latents(&self, post: &GaussianBatch, cfg: &EnhancementConfig, stream: u64) -> Array2<f64> {
        match cfg.latent_mode {
            LatentMode::PosteriorMean => post.mean.clone(),
            LatentMode::Sampled { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(stream);
                let eps = Array2::from_shape_simple_fn(post.mean.dim(), || rng.sample(StandardNormal));
                post.sample(&eps)
            }
        }
    }

    /// Decoded speech and noise LPS means (denormalized) for the given
    /// posteriors.
    pub fn decode_estimates(&self, speech: &GaussianBatch, noise: &GaussianBatch, cfg: &EnhancementConfig) -> Result<(Array2<f64>, Array2<f64>)> {
        let zx = self.latents(speech, cfg, 0);
        let zd = self.latents(noise, cfg, 1);
        let cdec = self.cvae.decoder.as_ref().expect("teachers have decoders");
        let ndec = self.nvae.decoder.as_ref().expect("teachers have decoders");
        let x = self.cvae.normalization.invert(decode_chunked(cdec, zx.view())?.mean.view());
        let d = self.nvae.normalization.invert(decode_chunked(ndec, zd.view())?.mean.view());
        Ok((x, d))
    }

    fn finish(&self, spec: &Spectrogram, speech: GaussianBatch, noise: GaussianBatch, cfg: &EnhancementConfig) -> Result<(Waveform, Array2<f64>, Diagnostics)> {
        let (x, d) = self.decode_estimates(&speech, &noise, cfg)?;
        let mask = mask_matrix(x.view(), d.view(), cfg);
        let enhanced = istft(&apply_mask(spec, mask.view())?)?;
        let diag = Diagnostics {
            num_frames: spec.num_frames(),
            oracle: cfg.oracle,
            silent_input: false,
            untrained_checkpoint: self.untrained,
            mask: Some(MaskStats::of(&mask)),
            irm_gap: None,
            speech_posteriors: speech.iter().collect(),
            noise_posteriors: noise.iter().collect(),
        };
        Ok((enhanced, mask, diag))
    }

    fn silent(&self, noisy: &Waveform, cfg: &EnhancementConfig) -> (Waveform, Diagnostics) {
        log::warn!("silent input returned unchanged");
        (
            noisy.clone(),
            Diagnostics {
                num_frames: 0,
                oracle: cfg.oracle,
                silent_input: true,
                untrained_checkpoint: self.untrained,
                mask: None,
                irm_gap: None,
                speech_posteriors: Vec::new(),
                noise_posteriors: Vec::new(),
            },
        )
    }

    pub fn enhance(&self, noisy: &Waveform, cfg: &EnhancementConfig) -> Result<(Waveform, Diagnostics)> {
        cfg.validate()?;
        let ns = self
            .nsvae
            .as_ref()
            .ok_or_else(|| Error::Config("enhancement needs a noisy-speech VAE".into()))?;
        if noisy.power() == 0.0 {
            return Ok(self.silent(noisy, cfg));
        }
        let spec = stft(noisy, DEFAULT_FRAME_LEN, DEFAULT_HOP_LEN)?;
        let y = lps(&spec, DEFAULT_POWER_FLOOR)?.values;
        let mut posts = encode_chunked(&ns.encoder, ns.normalization.apply(y.view()).view())?;
        let noise = posts.pop().expect("two latents");
        let speech = posts.pop().expect("two latents");
        let (wave, _, diag) = self.finish(&spec, speech, noise, cfg)?;
        Ok((wave, diag))
    }

    /// Enhances `speech + noise` with latents taken from the clean-speech
    /// and noise encoders applied to the separate sources.
    pub fn enhance_oracle(&self, speech: &Waveform, noise: &Waveform, cfg: &EnhancementConfig) -> Result<(Waveform, Diagnostics)> {
        cfg.validate()?;
        if speech.len() != noise.len() || speech.sample_rate() != noise.sample_rate() {
            return Err(Error::invalid(format!(
                "speech ({} samples) and noise ({} samples) are not aligned",
                speech.len(),
                noise.len()
            )));
        }
        let sum: Vec<f64> = speech.samples().iter().zip(noise.samples()).map(|(a, b)| a + b).collect();
        let noisy = Waveform::new(sum, speech.sample_rate())?;
        let cfg = EnhancementConfig { oracle: true, ..*cfg };
        if noisy.power() == 0.0 {
            return Ok(self.silent(&noisy, &cfg));
        }
        let spec = stft(&noisy, DEFAULT_FRAME_LEN, DEFAULT_HOP_LEN)?;
        let xs = stft(speech, DEFAULT_FRAME_LEN, DEFAULT_HOP_LEN)?;
        let ds = stft(noise, DEFAULT_FRAME_LEN, DEFAULT_HOP_LEN)?;
        let x = lps(&xs, DEFAULT_POWER_FLOOR)?.values;
        let d = lps(&ds, DEFAULT_POWER_FLOOR)?.values;
        let zx = encode_chunked(&self.cvae.encoder, self.cvae.normalization.apply(x.view()).view())?.swap_remove(0);
        let zd = encode_chunked(&self.nvae.encoder, self.nvae.normalization.apply(d.view()).view())?.swap_remove(0);
        let (wave, mask, mut diag) = self.finish(&spec, zx, zd, &cfg)?;
        let irm = mask_matrix(x.view(), d.view(), &cfg);
        diag.irm_gap = Some((&mask - &irm).mapv(f64::abs).mean().unwrap_or(0.0));
        Ok((wave, diag))
    }
}

/// Loads the three checkpoints and enhances one waveform.
pub fn enhance(noisy: &Waveform, nsvae: &Path, cvae: &Path, nvae: &Path, cfg: &EnhancementConfig) -> Result<(Waveform, Diagnostics)> {
    Enhancer::load(Some(nsvae), cvae, nvae)?.enhance(noisy, cfg)
}

pub fn enhance_oracle(speech: &Waveform, noise: &Waveform, cvae: &Path, nvae: &Path, cfg: &EnhancementConfig) -> Result<(Waveform, Diagnostics)> {
    Enhancer::load(None, cvae, nvae)?.enhance_oracle(speech, noise, cfg)
}

/// Ideal-ratio-mask enhancement from known sources; the reference point
/// for what a perfect speech/noise estimate would achieve.
pub fn ideal_ratio_enhance(speech: &Waveform, noise: &Waveform, cfg: &EnhancementConfig) -> Result<Waveform> {
    if speech.len() != noise.len() {
        return Err(Error::invalid("speech and noise are not aligned"));
    }
    let sum: Vec<f64> = speech.samples().iter().zip(noise.samples()).map(|(a, b)| a + b).collect();
    let noisy = Waveform::new(sum, speech.sample_rate())?;
    let spec = stft(&noisy, DEFAULT_FRAME_LEN, DEFAULT_HOP_LEN)?;
    let x = lps(&stft(speech, DEFAULT_FRAME_LEN, DEFAULT_HOP_LEN)?, DEFAULT_POWER_FLOOR)?.values;
    let d = lps(&stft(noise, DEFAULT_FRAME_LEN, DEFAULT_HOP_LEN)?, DEFAULT_POWER_FLOOR)?.values;
    istft(&apply_mask(&spec, mask_matrix(x.view(), d.view(), cfg).view())?)
}
