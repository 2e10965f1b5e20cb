use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};

/// How signal powers are measured when setting the mixing gain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PowerMode {
    /// Mean square over the whole utterance.
    #[default]
    FullUtterance,
    /// Mean square restricted to frames where the speech is active.
    ActiveSpeech,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixOptions {
    pub power_mode: PowerMode,
    /// Mixtures whose peak exceeds 1.0 are rescaled (all three signals
    /// jointly) to this peak.
    pub clip_peak: f64,
    /// Frame length used for speech activity detection, samples.
    pub activity_frame: usize,
    /// Frames quieter than the loudest one by more than this are inactive.
    pub activity_range_db: f64,
}

impl Default for MixOptions {
    fn default() -> Self {
        Self {
            power_mode: PowerMode::FullUtterance,
            clip_peak: 0.99,
            activity_frame: 320,
            activity_range_db: 40.0,
        }
    }
}

/// An aligned `(noisy, speech, noise)` triple with `noisy = speech + noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub noisy: Waveform,
    pub speech: Waveform,
    /// The noise exactly as it appears in `noisy`.
    pub noise: Waveform,
    /// Gain applied to the raw noise segment to hit the target SNR.
    pub noise_gain: f64,
    /// Joint anti-clipping gain (1.0 when no clipping occurred).
    pub clip_gain: f64,
    /// Start of the noise segment within the source noise.
    pub noise_offset: usize,
}

impl Mixture {
    pub fn realized_snr_db(&self, options: &MixOptions) -> f64 {
        let (ps, pn) = measure_powers(self.speech.samples(), self.noise.samples(), options);
        10.0 * (ps / pn).log10()
    }
}

fn active_indices(speech: &[f64], options: &MixOptions) -> Vec<std::ops::Range<usize>> {
    let frame = options.activity_frame.max(1);
    let energies: Vec<f64> = speech
        .chunks(frame)
        .map(|c| c.iter().map(|s| s * s).sum::<f64>() / c.len() as f64)
        .collect();
    let max = energies.iter().cloned().fold(0.0, f64::max);
    let threshold = max * 10f64.powf(-options.activity_range_db / 10.0);
    energies
        .iter()
        .enumerate()
        .filter(|(_, &e)| e > threshold)
        .map(|(i, _)| i * frame..((i + 1) * frame).min(speech.len()))
        .collect()
}

fn measure_powers(speech: &[f64], noise: &[f64], options: &MixOptions) -> (f64, f64) {
    let ms = |x: &[f64], ranges: &[std::ops::Range<usize>]| {
        let mut sum = 0.0;
        let mut n = 0usize;
        for r in ranges {
            sum += x[r.clone()].iter().map(|s| s * s).sum::<f64>();
            n += r.len();
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    };
    let ranges = match options.power_mode {
        PowerMode::FullUtterance => vec![0..speech.len()],
        PowerMode::ActiveSpeech => active_indices(speech, options),
    };
    (ms(speech, &ranges), ms(noise, &ranges))
}

pub fn mix_at_snr(speech: &Waveform, noise: &Waveform, snr_db: f64, seed: u64) -> Result<Mixture> {
    mix_at_snr_with(speech, noise, snr_db, seed, &MixOptions::default())
}

/// Mixes `speech` with a gain-adjusted segment of `noise` so that the
/// speech-to-noise power ratio equals `snr_db`. When the noise is longer than
/// the speech, the segment start is drawn uniformly from `seed`.
pub fn mix_at_snr_with(
    speech: &Waveform,
    noise: &Waveform,
    snr_db: f64,
    seed: u64,
    options: &MixOptions,
) -> Result<Mixture> {
    if speech.sample_rate() != noise.sample_rate() {
        return Err(Error::invalid(format!(
            "speech at {} Hz but noise at {} Hz",
            speech.sample_rate(),
            noise.sample_rate()
        )));
    }
    if !snr_db.is_finite() {
        return Err(Error::invalid("target SNR must be finite"));
    }
    if noise.len() < speech.len() {
        return Err(Error::TooShort {
            len: noise.len(),
            min: speech.len(),
        });
    }
    let slack = noise.len() - speech.len();
    let offset = if slack == 0 {
        0
    } else {
        ChaCha8Rng::seed_from_u64(seed).gen_range(0..=slack)
    };
    let segment = &noise.samples()[offset..offset + speech.len()];
    let (p_speech, p_noise) = measure_powers(speech.samples(), segment, options);
    if p_speech <= 0.0 {
        return Err(Error::Silent("speech"));
    }
    if p_noise <= 0.0 {
        return Err(Error::Silent("noise"));
    }
    let gain = (p_speech / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let mut speech_out: Vec<f64> = speech.samples().to_vec();
    let mut noise_out: Vec<f64> = segment.iter().map(|n| n * gain).collect();
    let mut noisy: Vec<f64> = speech_out.iter().zip(&noise_out).map(|(s, n)| s + n).collect();
    let peak = noisy.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let clip_gain = if peak > 1.0 { options.clip_peak / peak } else { 1.0 };
    if clip_gain != 1.0 {
        for v in speech_out.iter_mut().chain(noise_out.iter_mut()) {
            *v *= clip_gain;
        }
        noisy = speech_out.iter().zip(&noise_out).map(|(s, n)| s + n).collect();
    }
    Ok(Mixture {
        noisy: speech.with_samples(noisy),
        speech: speech.with_samples(speech_out),
        noise: speech.with_samples(noise_out),
        noise_gain: gain,
        clip_gain,
        noise_offset: offset,
    })
}
