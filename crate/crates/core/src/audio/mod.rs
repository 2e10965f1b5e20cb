//! Waveforms, WAV ingestion, resampling, STFT analysis/synthesis, log-power
//! features, SNR-controlled mixing and spectral masking.

mod mask;
mod mixing;
pub mod resample;
mod stft;
mod features;
pub mod wav;

pub use features::{lps, LpsFrames, DEFAULT_POWER_FLOOR};
pub use mask::apply_mask;
pub use mixing::{mix_at_snr, mix_at_snr_with, MixOptions, Mixture, PowerMode};
pub use stft::{istft, stft, Spectrogram, Stft, WindowKind, DEFAULT_FRAME_LEN, DEFAULT_HOP_LEN};

use crate::error::{Error, Result};

/// Working sample rate of the whole pipeline.
pub const SAMPLE_RATE: u32 = 16_000;

/// Mono real-valued signal. Samples are guaranteed finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("waveform sample {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean square amplitude over the whole signal.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub(crate) fn with_samples(&self, samples: Vec<f64>) -> Self {
        Self {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}
