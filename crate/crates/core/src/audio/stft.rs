use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};

/// 32 ms at 16 kHz, giving 257 one-sided bins.
pub const DEFAULT_FRAME_LEN: usize = 512;
pub const DEFAULT_HOP_LEN: usize = 256;

/// Synthesis envelope values below this fraction of the envelope maximum are
/// treated as uncovered.
const ENVELOPE_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    #[default]
    HannPeriodic,
}

impl WindowKind {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            WindowKind::HannPeriodic => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
                .collect(),
        }
    }
}

/// One-sided complex spectrogram, `[frames x bins]`.
///
/// The analysed signal is the original waveform with `pad` leading zeros and
/// enough trailing zeros to fill the last frame; `signal_len` records the
/// original length so synthesis can crop exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub bins: Array2<Complex64>,
    pub frame_len: usize,
    pub hop_len: usize,
    pub window: WindowKind,
    pub sample_rate: u32,
    pub signal_len: usize,
    pub pad: usize,
}

impl Spectrogram {
    pub fn num_frames(&self) -> usize {
        self.bins.nrows()
    }

    pub fn num_bins(&self) -> usize {
        self.bins.ncols()
    }

    /// |X|^2 per bin.
    pub fn power(&self) -> Array2<f64> {
        self.bins.mapv(|c| c.norm_sqr())
    }

    pub fn magnitude(&self) -> Array2<f64> {
        self.bins.mapv(|c| c.norm())
    }

    fn validate(&self) -> Result<()> {
        if self.frame_len == 0 || self.hop_len == 0 || self.hop_len > self.frame_len {
            return Err(Error::invalid(format!(
                "inconsistent frame/hop metadata: frame {} hop {}",
                self.frame_len, self.hop_len
            )));
        }
        if self.num_bins() != self.frame_len / 2 + 1 {
            return Err(Error::invalid(format!(
                "spectrogram has {} bins but frame length {} implies {}",
                self.num_bins(),
                self.frame_len,
                self.frame_len / 2 + 1
            )));
        }
        if self.num_frames() == 0 {
            return Err(Error::invalid("spectrogram has no frames"));
        }
        let covered = (self.num_frames() - 1) * self.hop_len + self.frame_len;
        if self.pad + self.signal_len > covered {
            return Err(Error::invalid(format!(
                "signal length {} with padding {} exceeds the {covered} samples covered by the frames",
                self.signal_len, self.pad
            )));
        }
        Ok(())
    }
}

/// Reusable STFT analysis/synthesis engine for one frame/hop configuration.
pub struct Stft {
    frame_len: usize,
    hop_len: usize,
    window_kind: WindowKind,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft")
            .field("frame_len", &self.frame_len)
            .field("hop_len", &self.hop_len)
            .field("window", &self.window_kind)
            .finish()
    }
}

impl Default for Stft {
    fn default() -> Self {
        Self::new(DEFAULT_FRAME_LEN, DEFAULT_HOP_LEN).expect("default STFT parameters are valid")
    }
}

impl Stft {
    pub fn new(frame_len: usize, hop_len: usize) -> Result<Self> {
        if frame_len < 2 || frame_len % 2 != 0 {
            return Err(Error::invalid(format!(
                "frame length must be even and >= 2, got {frame_len}"
            )));
        }
        // Hann with hop <= frame/2 keeps every sample covered by a nonzero
        // window value, which the synthesis normalization needs.
        if hop_len == 0 || hop_len > frame_len / 2 {
            return Err(Error::invalid(format!(
                "hop length {hop_len} must be in 1..={} for a Hann window",
                frame_len / 2
            )));
        }
        let mut planner = FftPlanner::new();
        let window_kind = WindowKind::HannPeriodic;
        Ok(Self {
            frame_len,
            hop_len,
            window_kind,
            window: window_kind.coefficients(frame_len),
            forward: planner.plan_fft_forward(frame_len),
            inverse: planner.plan_fft_inverse(frame_len),
        })
    }

    pub fn num_bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    pub fn analyze(&self, wave: &Waveform) -> Result<Spectrogram> {
        let x = wave.samples();
        if x.len() < self.frame_len {
            return Err(Error::TooShort {
                len: x.len(),
                min: self.frame_len,
            });
        }
        let pad = self.frame_len - self.hop_len;
        let num_frames = (x.len() + pad).div_ceil(self.hop_len);
        let bins_per_frame = self.num_bins();
        let mut bins = Array2::<Complex64>::zeros((num_frames, bins_per_frame));
        let mut buf = vec![Complex64::new(0.0, 0.0); self.frame_len];
        for (n, mut row) in bins.rows_mut().into_iter().enumerate() {
            let start = (n * self.hop_len) as isize - pad as isize;
            for (i, slot) in buf.iter_mut().enumerate() {
                let idx = start + i as isize;
                let s = if idx >= 0 && (idx as usize) < x.len() {
                    x[idx as usize]
                } else {
                    0.0
                };
                *slot = Complex64::new(s * self.window[i], 0.0);
            }
            self.forward.process(&mut buf);
            for (dst, src) in row.iter_mut().zip(&buf[..bins_per_frame]) {
                *dst = *src;
            }
        }
        Ok(Spectrogram {
            bins,
            frame_len: self.frame_len,
            hop_len: self.hop_len,
            window: self.window_kind,
            sample_rate: wave.sample_rate(),
            signal_len: x.len(),
            pad,
        })
    }

    /// Weighted overlap-add synthesis normalized by the summed squared
    /// window, which inverts [`Stft::analyze`] exactly wherever the envelope
    /// is nonzero.
    pub fn synthesize(&self, spec: &Spectrogram) -> Result<Waveform> {
        spec.validate()?;
        if spec.frame_len != self.frame_len || spec.hop_len != self.hop_len {
            return Err(Error::invalid(format!(
                "spectrogram was produced with frame {} hop {}, engine uses frame {} hop {}",
                spec.frame_len, spec.hop_len, self.frame_len, self.hop_len
            )));
        }
        let total = (spec.num_frames() - 1) * self.hop_len + self.frame_len;
        let mut out = vec![0.0; total];
        let mut envelope = vec![0.0; total];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.frame_len];
        let half = self.frame_len / 2;
        for (n, row) in spec.bins.rows().into_iter().enumerate() {
            buf[..=half].copy_from_slice(row.as_slice().expect("standard layout"));
            // DC and Nyquist are real for a real signal
            buf[0].im = 0.0;
            buf[half].im = 0.0;
            for k in 1..half {
                buf[self.frame_len - k] = buf[k].conj();
            }
            self.inverse.process(&mut buf);
            let start = n * self.hop_len;
            let scale = 1.0 / self.frame_len as f64;
            for i in 0..self.frame_len {
                let w = self.window[i];
                out[start + i] += buf[i].re * scale * w;
                envelope[start + i] += w * w;
            }
        }
        let max_env = envelope.iter().cloned().fold(0.0, f64::max);
        let samples = out
            .iter()
            .zip(&envelope)
            .skip(spec.pad)
            .take(spec.signal_len)
            .map(|(&o, &e)| if e > ENVELOPE_EPS * max_env { o / e } else { 0.0 })
            .collect();
        Waveform::new(samples, spec.sample_rate)
    }
}

pub fn stft(wave: &Waveform, frame_len: usize, hop_len: usize) -> Result<Spectrogram> {
    Stft::new(frame_len, hop_len)?.analyze(wave)
}

pub fn istft(spec: &Spectrogram) -> Result<Waveform> {
    Stft::new(spec.frame_len, spec.hop_len)
        .map_err(|e| Error::invalid(format!("inconsistent frame/hop metadata: {e}")))?
        .synthesize(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::SAMPLE_RATE;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn white_noise(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new(
            (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            SAMPLE_RATE,
        )
        .unwrap()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    #[test]
    fn one_second_gives_257_bins() {
        let s = stft(&white_noise(16_000, 1), 512, 256).unwrap();
        assert_eq!(s.num_bins(), 257);
        assert!(s.num_frames() >= 62);
    }

    #[test]
    fn zero_waveform_gives_zero_bins() {
        let s = stft(&Waveform::zeros(4000, SAMPLE_RATE), 512, 256).unwrap();
        assert!(s.bins.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn short_waveform_is_rejected() {
        let err = stft(&Waveform::zeros(511, SAMPLE_RATE), 512, 256).unwrap_err();
        assert!(matches!(err, Error::TooShort { len: 511, min: 512 }));
    }

    #[test]
    fn sinusoid_peaks_at_expected_bin_and_matches_direct_dft() {
        let freq = 1000.0;
        let wave = Waveform::new(
            (0..16_000)
                .map(|n| (2.0 * PI * freq * n as f64 / 16_000.0).sin())
                .collect(),
            SAMPLE_RATE,
        )
        .unwrap();
        let s = stft(&wave, 512, 256).unwrap();
        let frame = 10;
        let row = s.bins.row(frame);
        let peak = (0..row.len())
            .max_by(|&a, &b| row[a].norm().partial_cmp(&row[b].norm()).unwrap())
            .unwrap();
        assert_eq!(peak, 32);

        // direct DFT of the same windowed frame
        let window = WindowKind::HannPeriodic.coefficients(512);
        let start = frame * 256 - (512 - 256);
        for k in [0usize, 31, 32, 33, 100, 256] {
            let mut acc = Complex64::new(0.0, 0.0);
            for (i, w) in window.iter().enumerate() {
                let ang = -2.0 * PI * (k * i) as f64 / 512.0;
                acc += Complex64::from_polar(wave.samples()[start + i] * w, ang);
            }
            assert!((acc - row[k]).norm() < 1e-9, "bin {k}");
        }
    }

    #[test]
    fn roundtrip_white_noise() {
        let w = white_noise(16_000, 7);
        let back = istft(&stft(&w, 512, 256).unwrap()).unwrap();
        assert_eq!(back.len(), w.len());
        assert!(rel_err(back.samples(), w.samples()) <= 1e-6);
    }

    #[test]
    fn zero_spectrogram_synthesizes_silence() {
        let s = stft(&Waveform::zeros(2048, SAMPLE_RATE), 512, 256).unwrap();
        assert!(istft(&s).unwrap().samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_frame_reproduces_windowed_frame() {
        let w = white_noise(512, 3);
        let window = WindowKind::HannPeriodic.coefficients(512);
        let mut buf: Vec<Complex64> = w
            .samples()
            .iter()
            .zip(&window)
            .map(|(s, h)| Complex64::new(s * h, 0.0))
            .collect();
        FftPlanner::new().plan_fft_forward(512).process(&mut buf);
        let bins = Array2::from_shape_vec((1, 257), buf[..257].to_vec()).unwrap();
        let spec = Spectrogram {
            bins,
            frame_len: 512,
            hop_len: 256,
            window: WindowKind::HannPeriodic,
            sample_rate: SAMPLE_RATE,
            signal_len: 512,
            pad: 0,
        };
        let out = istft(&spec).unwrap();
        // synthesis applies the window again and divides by w^2
        for i in 1..512 {
            assert!((out.samples()[i] - w.samples()[i]).abs() < 1e-9, "sample {i}");
        }
        assert_eq!(out.samples()[0], 0.0);
    }

    #[test]
    fn inconsistent_metadata_is_rejected() {
        let mut s = stft(&white_noise(2048, 1), 512, 256).unwrap();
        s.hop_len = 0;
        assert!(istft(&s).is_err());
        let mut s = stft(&white_noise(2048, 1), 512, 256).unwrap();
        s.frame_len = 256;
        assert!(istft(&s).is_err());
        let mut s = stft(&white_noise(2048, 1), 512, 256).unwrap();
        s.signal_len = 100_000;
        assert!(istft(&s).is_err());
    }
}
