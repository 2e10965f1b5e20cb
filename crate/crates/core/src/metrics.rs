//! Objective evaluation: SI-SDR, STOI, optional external PESQ, and
//! mean ± 95% confidence summaries.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::resample::resample_octave;
use crate::audio::wav::{write_wav, WavFormat};
use crate::audio::Waveform;
use crate::error::{Error, Result};

/// Environment variable naming an external PESQ executable.
pub const PESQ_ENV: &str = "BPVAE_PESQ";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiSdrOptions {
    /// Remove the mean of both signals before projecting.
    pub zero_mean: bool,
    /// Results are clamped to `[-cap_db, cap_db]`.
    pub cap_db: f64,
}

impl Default for SiSdrOptions {
    fn default() -> Self {
        Self {
            zero_mean: true,
            cap_db: 60.0,
        }
    }
}

fn check_pair(reference: &Waveform, estimate: &Waveform) -> Result<()> {
    if reference.len() != estimate.len() {
        return Err(Error::DimensionMismatch {
            context: "reference and estimate lengths",
            expected: reference.len(),
            got: estimate.len(),
        });
    }
    if reference.sample_rate() != estimate.sample_rate() {
        return Err(Error::invalid("reference and estimate sample rates differ"));
    }
    Ok(())
}

pub fn si_sdr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    si_sdr_with(reference, estimate, &SiSdrOptions::default())
}

/// Scale-invariant SDR in dB. Not shift invariant: a delayed estimate
/// scores as distortion.
pub fn si_sdr_with(reference: &Waveform, estimate: &Waveform, opts: &SiSdrOptions) -> Result<f64> {
    check_pair(reference, estimate)?;
    let center = |x: &[f64]| -> Vec<f64> {
        if opts.zero_mean && !x.is_empty() {
            let m = x.iter().sum::<f64>() / x.len() as f64;
            x.iter().map(|v| v - m).collect()
        } else {
            x.to_vec()
        }
    };
    let r = center(reference.samples());
    let e = center(estimate.samples());
    let rr: f64 = r.iter().map(|v| v * v).sum();
    if rr == 0.0 {
        return Err(Error::Silent("reference"));
    }
    let alpha = r.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>() / rr;
    let target_energy = alpha * alpha * rr;
    let error_energy: f64 = r.iter().zip(&e).map(|(a, b)| (b - alpha * a).powi(2)).sum();
    let cap = opts.cap_db;
    if error_energy <= target_energy * 10f64.powf(-cap / 10.0) {
        return Ok(cap);
    }
    Ok((10.0 * (target_energy / error_energy).log10()).clamp(-cap, cap))
}

const STOI_RATE: usize = 10_000;
const STOI_FRAME: usize = 256;
const STOI_NFFT: usize = 512;
const STOI_BANDS: usize = 15;
const STOI_MIN_FREQ: f64 = 150.0;
/// Frames per intermediate-intelligibility segment (384 ms).
const STOI_SEGMENT: usize = 30;
const STOI_BETA_DB: f64 = -15.0;
const STOI_DYN_RANGE_DB: f64 = 40.0;

/// Hann window without its zero endpoints (MATLAB `hanning`).
fn hanning(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * (k + 1) as f64 / (n + 1) as f64).cos()))
        .collect()
}

fn frame_starts(len: usize, frame: usize, hop: usize) -> impl Iterator<Item = usize> {
    // the final full frame is excluded, as in the reference implementation
    (0..len.saturating_sub(frame)).step_by(hop)
}

fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hop = STOI_FRAME / 2;
    let w = hanning(STOI_FRAME);
    let starts: Vec<usize> = frame_starts(x.len(), STOI_FRAME, hop).collect();
    let energies: Vec<f64> = starts
        .iter()
        .map(|&s| {
            let e: f64 = (0..STOI_FRAME).map(|k| (w[k] * x[s + k]).powi(2)).sum();
            20.0 * (e.sqrt() + f64::EPSILON).log10()
        })
        .collect();
    let max = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energies)
        .filter(|(_, &e)| max - STOI_DYN_RANGE_DB - e < 0.0)
        .map(|(&s, _)| s)
        .collect();
    let out_len = if kept.is_empty() {
        0
    } else {
        (kept.len() - 1) * hop + STOI_FRAME
    };
    let mut xs = vec![0.0; out_len];
    let mut ys = vec![0.0; out_len];
    for (i, &s) in kept.iter().enumerate() {
        for k in 0..STOI_FRAME {
            xs[i * hop + k] += w[k] * x[s + k];
            ys[i * hop + k] += w[k] * y[s + k];
        }
    }
    (xs, ys)
}

/// Squared-magnitude spectra `[frames][NFFT/2 + 1]`.
fn power_frames(x: &[f64], fft: &Arc<dyn Fft<f64>>) -> Vec<Vec<f64>> {
    let w = hanning(STOI_FRAME);
    frame_starts(x.len(), STOI_FRAME, STOI_FRAME / 2)
        .map(|s| {
            let mut buf = vec![Complex64::new(0.0, 0.0); STOI_NFFT];
            for k in 0..STOI_FRAME {
                buf[k].re = w[k] * x[s + k];
            }
            fft.process(&mut buf);
            buf[..STOI_NFFT / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
        })
        .collect()
}

/// One-third octave band edges as FFT-bin ranges.
fn third_octave_bands() -> Vec<std::ops::Range<usize>> {
    let bins = STOI_NFFT / 2 + 1;
    let freqs: Vec<f64> = (0..bins)
        .map(|i| i as f64 * STOI_RATE as f64 / STOI_NFFT as f64)
        .collect();
    let nearest = |target: f64| -> usize {
        let mut best = 0;
        for (i, f) in freqs.iter().enumerate() {
            if (f - target).powi(2) < (freqs[best] - target).powi(2) {
                best = i;
            }
        }
        best
    };
    (0..STOI_BANDS)
        .map(|k| {
            let k = k as f64;
            let lo = STOI_MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = STOI_MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0);
            nearest(lo)..nearest(hi)
        })
        .collect()
}

fn band_envelopes(power: &[Vec<f64>], bands: &[std::ops::Range<usize>]) -> Vec<Vec<f64>> {
    // [band][frame]
    bands
        .iter()
        .map(|b| power.iter().map(|p| p[b.clone()].iter().sum::<f64>().sqrt()).collect())
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Short-time objective intelligibility of `estimate` against `reference`.
/// Signals are resampled to 10 kHz and frames more than 40 dB below the
/// loudest reference frame are dropped before analysis. The score is
/// clamped to `[0, 1]`.
pub fn stoi(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    check_pair(reference, estimate)?;
    let rate = reference.sample_rate() as usize;
    let g = gcd(STOI_RATE, rate);
    let (up, down) = (STOI_RATE / g, rate / g);
    let x = resample_octave(reference.samples(), up, down);
    let y = resample_octave(estimate.samples(), up, down);
    let min_len = STOI_FRAME + STOI_SEGMENT * STOI_FRAME / 2;
    if x.len() <= min_len {
        return Err(Error::TooShort {
            len: reference.len(),
            min: min_len * down / up + 1,
        });
    }
    let (x, y) = remove_silent_frames(&x, &y);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(STOI_NFFT);
    let px = power_frames(&x, &fft);
    if px.len() < STOI_SEGMENT {
        return Err(Error::invalid(format!(
            "only {} non-silent frames, {STOI_SEGMENT} needed for one segment",
            px.len()
        )));
    }
    let py = power_frames(&y, &fft);
    let bands = third_octave_bands();
    let xt = band_envelopes(&px, &bands);
    let yt = band_envelopes(&py, &bands);
    let clip = 1.0 + 10f64.powf(-STOI_BETA_DB / 20.0);
    let frames = px.len();
    let mut total = 0.0;
    let mut count = 0usize;
    for m in STOI_SEGMENT..=frames {
        for (xb, yb) in xt.iter().zip(&yt) {
            let xs = &xb[m - STOI_SEGMENT..m];
            let ys = &yb[m - STOI_SEGMENT..m];
            let scale = norm(xs) / (norm(ys) + f64::EPSILON);
            let mut yp: Vec<f64> = ys.iter().zip(xs).map(|(yv, xv)| (yv * scale).min(xv * clip)).collect();
            let mut xc = xs.to_vec();
            for v in [&mut yp, &mut xc] {
                let mean = v.iter().sum::<f64>() / STOI_SEGMENT as f64;
                v.iter_mut().for_each(|e| *e -= mean);
                let n = norm(v) + f64::EPSILON;
                v.iter_mut().for_each(|e| *e /= n);
            }
            total += yp.iter().zip(&xc).map(|(a, b)| a * b).sum::<f64>();
            count += 1;
        }
    }
    Ok((total / count as f64).clamp(0.0, 1.0))
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Per-utterance scores. STOI is stored in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub utterance_id: String,
    pub si_sdr_db: f64,
    pub stoi: f64,
    pub pesq: Option<f64>,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        if !self.si_sdr_db.is_finite() || !self.stoi.is_finite() || self.pesq.is_some_and(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("scores of {}", self.utterance_id)));
        }
        if !(0.0..=1.0).contains(&self.stoi) {
            return Err(Error::invalid(format!("STOI {} outside [0, 1]", self.stoi)));
        }
        Ok(())
    }
}

/// Scores one estimate; PESQ only when a tool is given.
pub fn evaluate(id: &str, reference: &Waveform, estimate: &Waveform, pesq: Option<&PesqTool>) -> Result<EvalRecord> {
    let record = EvalRecord {
        utterance_id: id.to_string(),
        si_sdr_db: si_sdr(reference, estimate)?,
        stoi: stoi(reference, estimate)?,
        pesq: pesq.map(|t| t.score(reference, estimate)).transpose()?,
    };
    record.validate()?;
    Ok(record)
}

/// Mean with a normal-approximation 95% half-width `1.96 * sd / sqrt(n)`,
/// `sd` being the population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub ci95: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        let n = values.len();
        if n < 2 {
            return Err(Error::invalid(format!("need at least 2 values for a confidence interval, got {n}")));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Ok(Self {
            mean,
            ci95: 1.96 * var.sqrt() / (n as f64).sqrt(),
            n,
        })
    }

    /// `mean(±ci)` with `digits` decimals.
    pub fn display(&self, digits: usize, scale: f64) -> String {
        format!("{:.*}(±{:.*})", digits, self.mean * scale, digits, self.ci95 * scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub si_sdr_db: Summary,
    pub stoi: Summary,
    /// Present only when every record carries a PESQ score.
    pub pesq: Option<Summary>,
}

pub fn aggregate(records: &[EvalRecord]) -> Result<MetricSummary> {
    let si: Vec<f64> = records.iter().map(|r| r.si_sdr_db).collect();
    let st: Vec<f64> = records.iter().map(|r| r.stoi).collect();
    let pesq: Option<Vec<f64>> = records.iter().map(|r| r.pesq).collect();
    Ok(MetricSummary {
        si_sdr_db: Summary::of(&si)?,
        stoi: Summary::of(&st)?,
        pesq: pesq.map(|p| Summary::of(&p)).transpose()?,
    })
}

/// Writes `utterance_id,si_sdr_db,stoi,pesq` rows; PESQ is blank when
/// absent.
pub fn write_records_csv(path: impl AsRef<Path>, records: &[EvalRecord]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["utterance_id", "si_sdr_db", "stoi", "pesq"])?;
    for r in records {
        w.write_record([
            r.utterance_id.clone(),
            format!("{:.6}", r.si_sdr_db),
            format!("{:.6}", r.stoi),
            r.pesq.map(|p| format!("{p:.6}")).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records_csv(path: impl AsRef<Path>) -> Result<Vec<EvalRecord>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let num = |i: usize| -> Result<f64> {
            row.get(i)
                .unwrap_or("")
                .parse()
                .map_err(|_| Error::Dataset(format!("bad number in column {i} of {row:?}")))
        };
        out.push(EvalRecord {
            utterance_id: row.get(0).unwrap_or("").to_string(),
            si_sdr_db: num(1)?,
            stoi: num(2)?,
            pesq: match row.get(3) {
                Some("") | None => None,
                Some(_) => Some(num(3)?),
            },
        });
    }
    Ok(out)
}

/// External PESQ scorer. The executable is called as
/// `<tool> <reference.wav> <degraded.wav>` on 16-bit WAV files and the last
/// number printed on stdout is taken as the score.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PesqTool {
    pub executable: PathBuf,
}

static PESQ_CALLS: AtomicUsize = AtomicUsize::new(0);

impl PesqTool {
    /// The tool named by [`PESQ_ENV`], if set and non-empty.
    pub fn from_env() -> Option<Self> {
        std::env::var_os(PESQ_ENV)
            .filter(|v| !v.is_empty())
            .map(|v| Self { executable: v.into() })
    }

    pub fn score(&self, reference: &Waveform, degraded: &Waveform) -> Result<f64> {
        let n = PESQ_CALLS.fetch_add(1, Ordering::Relaxed);
        let dir = std::env::temp_dir().join(format!("bpvae-pesq-{}-{n}", std::process::id()));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let r = dir.join("reference.wav");
        let d = dir.join("degraded.wav");
        let result = (|| {
            write_wav(&r, reference, WavFormat::Pcm16)?;
            write_wav(&d, degraded, WavFormat::Pcm16)?;
            let out = Command::new(&self.executable)
                .arg(&r)
                .arg(&d)
                .output()
                .map_err(|e| Error::External(format!("{}: {e}", self.executable.display())))?;
            if !out.status.success() {
                return Err(Error::External(format!(
                    "{} exited with {}",
                    self.executable.display(),
                    out.status
                )));
            }
            parse_pesq_output(&String::from_utf8_lossy(&out.stdout))
        })();
        let _ = fs::remove_dir_all(&dir);
        result
    }
}

fn parse_pesq_output(stdout: &str) -> Result<f64> {
    let score = stdout
        .split(|c: char| c.is_whitespace() || c == '=' || c == ',')
        .filter_map(|t| t.parse::<f64>().ok())
        .last()
        .ok_or_else(|| Error::External("no score in PESQ output".into()))?;
    if !(-0.5..=4.5).contains(&score) {
        return Err(Error::External(format!("PESQ score {score} outside [-0.5, 4.5]")));
    }
    Ok(score)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wave(v: Vec<f64>) -> Waveform {
        Waveform::new(v, 16_000).unwrap()
    }

    fn noise(seed: u64, n: usize, amp: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-amp..amp)).collect()
    }

    /// Speech-like test signal: amplitude-modulated harmonics.
    fn babble(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f0: f64 = rng.gen_range(100.0..200.0);
        (0..n)
            .map(|i| {
                let t = i as f64 / 16_000.0;
                let env = 0.5 * (1.0 + (2.0 * std::f64::consts::PI * 3.0 * t).sin());
                env * (1..6)
                    .map(|h| (2.0 * std::f64::consts::PI * f0 * h as f64 * t).sin() / h as f64)
                    .sum::<f64>()
                    * 0.2
            })
            .collect()
    }

    #[test]
    fn identical_signals_hit_the_cap() {
        let r = wave(noise(1, 1000, 0.5));
        assert_eq!(si_sdr(&r, &r).unwrap(), 60.0);
        assert_eq!(si_sdr(&r, &r.scaled(2.0)).unwrap(), 60.0);
    }

    #[test]
    fn hand_case_without_mean_removal() {
        let opts = SiSdrOptions {
            zero_mean: false,
            ..Default::default()
        };
        let v = si_sdr_with(&wave(vec![1.0, 0.0]), &wave(vec![1.0, 1.0]), &opts).unwrap();
        assert!(v.abs() < 1e-12, "{v}");
    }

    #[test]
    fn silent_reference_and_length_mismatch_are_rejected() {
        assert!(si_sdr(&wave(vec![0.0; 10]), &wave(vec![1.0; 10])).is_err());
        assert!(si_sdr(&wave(vec![1.0; 10]), &wave(vec![1.0; 11])).is_err());
    }

    #[test]
    fn shift_is_not_invariant() {
        let x = babble(2, 8000);
        let mut shifted = vec![0.0; 40];
        shifted.extend_from_slice(&x[..8000 - 40]);
        assert!(si_sdr(&wave(x), &wave(shifted)).unwrap() < 20.0);
    }

    proptest! {
        #[test]
        fn scale_invariance(seed in 0u64..1000, c in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0]) {
            let r = wave(noise(seed, 256, 1.0));
            let mut e = noise(seed + 7, 256, 1.0);
            for (a, b) in e.iter_mut().zip(r.samples()) {
                *a += 2.0 * b;
            }
            let e = wave(e);
            let a = si_sdr(&r, &e).unwrap();
            let b = si_sdr(&r, &e.scaled(c)).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn stoi_is_bounded(seed in 0u64..50) {
            let r = wave(noise(seed, 16_000, 1.0));
            let e = wave(noise(seed + 1, 16_000, 1.0));
            let s = stoi(&r, &e).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn stoi_self_similarity() {
        let x = wave(babble(3, 32_000));
        assert!(stoi(&x, &x).unwrap() >= 0.999);
    }

    #[test]
    fn stoi_degrades_with_noise() {
        let x = babble(4, 32_000);
        let p = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        // -10 dB SNR white noise
        let amp = (3.0 * p * 10.0).sqrt();
        let n = noise(5, x.len(), amp);
        let y: Vec<f64> = x.iter().zip(&n).map(|(a, b)| a + b).collect();
        let clean = stoi(&wave(x.clone()), &wave(x.clone())).unwrap();
        let noisy = stoi(&wave(x), &wave(y)).unwrap();
        assert!(noisy < clean, "{noisy} vs {clean}");
    }

    #[test]
    fn stoi_rejects_short_input() {
        let x = wave(babble(6, 4000));
        assert!(matches!(stoi(&x, &x), Err(Error::TooShort { .. })));
    }

    #[test]
    fn band_layout_matches_reference_table() {
        let b = third_octave_bands();
        assert_eq!(b.len(), 15);
        // 150 Hz band: edges 133.6 and 168.4 Hz on a 19.53 Hz grid
        assert_eq!(b[0], 7..9);
        assert!(b.windows(2).all(|w| w[0].end <= w[1].start + 1));
    }

    #[test]
    fn summary_closed_forms() {
        let s = Summary::of(&[0.0, 2.0]).unwrap();
        assert_eq!(s.mean, 1.0);
        assert!((s.ci95 - 1.96 / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(Summary::of(&[3.0, 3.0, 3.0]).unwrap().ci95, 0.0);
        assert!(Summary::of(&[1.0]).is_err());
        assert_eq!(s.display(2, 1.0), "1.00(±1.39)");
    }

    #[test]
    fn aggregate_is_permutation_invariant() {
        let recs: Vec<EvalRecord> = (0..5)
            .map(|i| EvalRecord {
                utterance_id: format!("u{i}"),
                si_sdr_db: i as f64 * 1.7 - 2.0,
                stoi: 0.1 * i as f64,
                pesq: None,
            })
            .collect();
        let mut rev = recs.clone();
        rev.reverse();
        let a = aggregate(&recs).unwrap();
        let b = aggregate(&rev).unwrap();
        assert!((a.si_sdr_db.mean - b.si_sdr_db.mean).abs() < 1e-12);
        assert!(a.pesq.is_none());
    }

    #[test]
    fn records_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![
            EvalRecord {
                utterance_id: "a".into(),
                si_sdr_db: 1.5,
                stoi: 0.75,
                pesq: None,
            },
            EvalRecord {
                utterance_id: "b".into(),
                si_sdr_db: -3.25,
                stoi: 0.5,
                pesq: Some(2.5),
            },
        ];
        let p = dir.path().join("r.csv");
        write_records_csv(&p, &recs).unwrap();
        assert_eq!(read_records_csv(&p).unwrap(), recs);
    }

    #[test]
    fn pesq_output_parsing() {
        assert_eq!(parse_pesq_output("P.862 Prediction (Raw MOS, MOS-LQO):  = 2.512\t2.377\n").unwrap(), 2.377);
        assert!(parse_pesq_output("error").is_err());
        assert!(parse_pesq_output("score 7.0").is_err());
    }
}
