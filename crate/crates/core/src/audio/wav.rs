//! WAV ingestion and export.
//!
//! Accepted input: mono PCM16 or float32 at 16 kHz, or 48 kHz which is
//! decimated to 16 kHz on load. Everything else is rejected.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::resample::resample_rational;
use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WavFormat {
    Pcm16,
    #[default]
    Float32,
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let unsupported = |reason: String| Error::UnsupportedAudio {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(unsupported(format!(
            "{} channels; only mono input is accepted",
            spec.channels
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(unsupported(format!(
                "{bits}-bit {fmt:?} samples; expected PCM16 or float32"
            )))
        }
    };
    let samples = match spec.sample_rate {
        SAMPLE_RATE => samples,
        48_000 => resample_rational(&samples, 1, 3),
        other => {
            return Err(unsupported(format!(
                "sample rate {other} Hz; expected 16000 or 48000"
            )))
        }
    };
    Waveform::new(samples, SAMPLE_RATE)
        .map_err(|e| unsupported(format!("invalid samples: {e}")))
}

pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform, format: WavFormat) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let spec = WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate(),
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => SampleFormat::Int,
            WavFormat::Float32 => SampleFormat::Float,
        },
    };
    let mut writer = WavWriter::create(path, spec)?;
    for &s in wave.samples() {
        match format {
            WavFormat::Pcm16 => {
                let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                writer.write_sample(v)?;
            }
            WavFormat::Float32 => writer.write_sample(s as f32)?,
        }
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.0, 0.25, -0.5, 0.75], SAMPLE_RATE).unwrap();
        write_wav(&path, &w, WavFormat::Float32).unwrap();
        assert_eq!(read_wav(&path).unwrap(), w);
    }

    #[test]
    fn pcm16_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.1, -0.3, 0.999], SAMPLE_RATE).unwrap();
        write_wav(&path, &w, WavFormat::Pcm16).unwrap();
        let r = read_wav(&path).unwrap();
        for (a, b) in r.samples().iter().zip(w.samples()) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn stereo_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut wr = WavWriter::create(&path, spec).unwrap();
        for _ in 0..8 {
            wr.write_sample(0i16).unwrap();
        }
        wr.finalize().unwrap();
        let err = read_wav(&path).unwrap_err();
        assert!(err.to_string().contains("mono"), "{err}");
    }

    #[test]
    fn forty_eight_khz_is_decimated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hi.wav");
        let w = Waveform::new(vec![0.0; 4800], 48_000).unwrap();
        write_wav(&path, &w, WavFormat::Float32).unwrap();
        let r = read_wav(&path).unwrap();
        assert_eq!(r.sample_rate(), SAMPLE_RATE);
        assert_eq!(r.len(), 1600);
    }

    #[test]
    fn other_rates_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lo.wav");
        let w = Waveform::new(vec![0.0; 100], 8_000).unwrap();
        write_wav(&path, &w, WavFormat::Float32).unwrap();
        assert!(matches!(
            read_wav(&path),
            Err(Error::UnsupportedAudio { .. })
        ));
    }
}
