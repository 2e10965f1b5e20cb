//! Synthetic speech/noise corpus and speaker-disjoint mixture manifests.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::wav::{write_wav, WavFormat};
use crate::audio::{Waveform, SAMPLE_RATE};
use crate::dataset::{write_manifest, MixtureSpec, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    /// Utterance length range in seconds.
    pub utterance_secs: (f64, f64),
    pub num_noise_files: usize,
    pub noise_secs: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_speakers: 10,
            utterances_per_speaker: 8,
            utterance_secs: (1.5, 3.0),
            num_noise_files: 12,
            noise_secs: 10.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusLayout {
    pub speech_dir: PathBuf,
    pub noise_dir: PathBuf,
}

/// Noise families cycled through by file index.
pub const NOISE_TYPES: [&str; 6] = ["white", "pink", "brown", "hum", "machine", "chirp"];

// (F1, F2, F3) of a few vowels, Hz
const VOWELS: [(f64, f64, f64); 7] = [
    (730.0, 1090.0, 2440.0),
    (270.0, 2290.0, 3010.0),
    (300.0, 870.0, 2240.0),
    (530.0, 1840.0, 2480.0),
    (570.0, 840.0, 2410.0),
    (440.0, 1020.0, 2240.0),
    (660.0, 1720.0, 2410.0),
];

struct Speaker {
    f0: f64,
    formant_scale: f64,
    tilt: f64,
}

fn secs(n: f64) -> usize {
    (n * SAMPLE_RATE as f64) as usize
}

fn white<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn normalize_peak(mut x: Vec<f64>, peak: f64) -> Vec<f64> {
    let m = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > 0.0 {
        x.iter_mut().for_each(|v| *v *= peak / m);
    }
    x
}

/// Harmonic source shaped by three formant resonances, syllable by
/// syllable, with silent gaps and occasional fricative bursts.
fn utterance<R: Rng>(spk: &Speaker, rng: &mut R, len: usize) -> Vec<f64> {
    let fs = SAMPLE_RATE as f64;
    let mut out = vec![0.0; len];
    let mut t = secs(rng.gen_range(0.05..0.2));
    while t < len {
        if rng.gen_bool(0.3) {
            let n = secs(rng.gen_range(0.04..0.1)).min(len - t);
            let noise = white(rng, n + 2);
            let amp = rng.gen_range(0.05..0.15);
            for i in 0..n {
                let hp = noise[i + 2] - 2.0 * noise[i + 1] + noise[i];
                let env = (PI * i as f64 / n as f64).sin();
                out[t + i] += amp * env * hp;
            }
            t += n;
        }
        let n = secs(rng.gen_range(0.12..0.3)).min(len.saturating_sub(t));
        let (f1, f2, f3) = VOWELS[rng.gen_range(0..VOWELS.len())];
        let formants = [f1, f2, f3].map(|f| f * spk.formant_scale);
        let bandwidths = [80.0, 110.0, 160.0];
        let f0 = spk.f0 * rng.gen_range(0.9..1.1);
        let glide = rng.gen_range(-0.15..0.1);
        let amp = rng.gen_range(0.5..1.0);
        let harmonics = ((0.45 * fs / (f0 * 1.2)) as usize).max(1);
        let mut phase = vec![0.0; harmonics];
        for i in 0..n {
            let frac = i as f64 / n.max(1) as f64;
            let pitch = f0 * (1.0 + glide * frac + 0.02 * (2.0 * PI * 5.0 * i as f64 / fs).sin());
            let env = (PI * frac).sin().powf(0.6);
            let mut s = 0.0;
            for (h, ph) in phase.iter_mut().enumerate() {
                let fh = pitch * (h + 1) as f64;
                if fh > 0.45 * fs {
                    break;
                }
                *ph += 2.0 * PI * fh / fs;
                let gain: f64 = formants
                    .iter()
                    .zip(bandwidths)
                    .map(|(f, b)| 1.0 / (1.0 + ((fh - f) / b).powi(2)))
                    .sum::<f64>()
                    * spk.tilt.powi(h as i32);
                s += gain * ph.sin();
            }
            out[t + i] += amp * env * s;
        }
        t += n + secs(rng.gen_range(0.03..0.15));
    }
    normalize_peak(out, 0.5)
}

fn one_pole(x: &[f64], a: f64) -> Vec<f64> {
    let mut y = 0.0;
    x.iter()
        .map(|v| {
            y = a * y + (1.0 - a) * v;
            y
        })
        .collect()
}

fn noise_signal<R: Rng>(kind: &str, rng: &mut R, len: usize) -> Vec<f64> {
    let fs = SAMPLE_RATE as f64;
    let x = match kind {
        "white" => white(rng, len),
        "pink" => {
            // Kellet's economy filter
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            white(rng, len)
                .into_iter()
                .map(|w| {
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
        "brown" => {
            let mut y = 0.0;
            white(rng, len)
                .into_iter()
                .map(|w| {
                    y = 0.995 * y + w;
                    y
                })
                .collect()
        }
        "hum" => {
            let mains = if rng.gen_bool(0.5) { 50.0 } else { 60.0 };
            let amps: Vec<f64> = (0..8).map(|_| rng.gen_range(0.1..1.0)).collect();
            let floor = white(rng, len);
            (0..len)
                .map(|i| {
                    let t = i as f64 / fs;
                    amps.iter()
                        .enumerate()
                        .map(|(h, a)| a * (2.0 * PI * mains * (h + 1) as f64 * t).sin())
                        .sum::<f64>()
                        + 0.05 * floor[i]
                })
                .collect()
        }
        "machine" => {
            let rate = rng.gen_range(2.0..10.0);
            let band = one_pole(&white(rng, len), rng.gen_range(0.6..0.9));
            let hp: Vec<f64> = band.windows(2).map(|w| w[1] - 0.5 * w[0]).chain([0.0]).collect();
            (0..len)
                .map(|i| (0.6 + 0.4 * (2.0 * PI * rate * i as f64 / fs).sin()) * hp[i])
                .collect()
        }
        "chirp" => {
            let (lo, hi) = (rng.gen_range(300.0..1500.0), rng.gen_range(2000.0..6000.0));
            let period = rng.gen_range(0.3..1.5);
            let floor = white(rng, len);
            let mut phase = 0.0;
            (0..len)
                .map(|i| {
                    let u = (i as f64 / fs / period).fract();
                    phase += 2.0 * PI * (lo + (hi - lo) * u) / fs;
                    phase.sin() + 0.1 * floor[i]
                })
                .collect()
        }
        other => unreachable!("unknown noise type {other}"),
    };
    normalize_peak(x, 0.5)
}

/// Writes `spkNN_uMM.wav` speech files and `<type>_KK.wav` noise files
/// under `out_dir/{speech,noise}`.
pub fn synthesize_corpus(cfg: &CorpusConfig, out_dir: impl AsRef<Path>) -> Result<CorpusLayout> {
    let out = out_dir.as_ref();
    if cfg.num_speakers == 0 || cfg.utterances_per_speaker == 0 || cfg.num_noise_files == 0 {
        return Err(Error::Config("corpus needs speakers, utterances and noise files".into()));
    }
    let (lo, hi) = cfg.utterance_secs;
    if !(lo > 0.0 && hi >= lo && cfg.noise_secs > 0.0) {
        return Err(Error::Config(format!("bad durations {:?} / {}", cfg.utterance_secs, cfg.noise_secs)));
    }
    let layout = CorpusLayout {
        speech_dir: out.join("speech"),
        noise_dir: out.join("noise"),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for s in 0..cfg.num_speakers {
        let spk = Speaker {
            f0: rng.gen_range(85.0..250.0),
            formant_scale: rng.gen_range(0.85..1.2),
            tilt: rng.gen_range(0.8..0.93),
        };
        for u in 0..cfg.utterances_per_speaker {
            let len = secs(if hi > lo { rng.gen_range(lo..hi) } else { lo });
            let w = Waveform::new(utterance(&spk, &mut rng, len), SAMPLE_RATE)?;
            write_wav(layout.speech_dir.join(format!("spk{s:02}_u{u:02}.wav")), &w, WavFormat::Float32)?;
        }
    }
    for k in 0..cfg.num_noise_files {
        let kind = NOISE_TYPES[k % NOISE_TYPES.len()];
        let w = Waveform::new(noise_signal(kind, &mut rng, secs(cfg.noise_secs)), SAMPLE_RATE)?;
        write_wav(layout.noise_dir.join(format!("{kind}_{k:02}.wav")), &w, WavFormat::Float32)?;
    }
    Ok(layout)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Train / validation / test fractions of speakers (and noise files).
    pub ratios: [f64; 3],
    pub snr_range_db: (f64, f64),
    pub mixtures_per_utterance: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            ratios: [0.7, 0.2, 0.1],
            snr_range_db: (-10.0, 15.0),
            mixtures_per_utterance: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifests {
    pub train: Vec<MixtureSpec>,
    pub validation: Vec<MixtureSpec>,
    pub test: Vec<MixtureSpec>,
}

impl DatasetManifests {
    pub fn split(&self, split: Split) -> &[MixtureSpec] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<MixtureSpec> {
        match split {
            Split::Train => &mut self.train,
            Split::Validation => &mut self.validation,
            Split::Test => &mut self.test,
        }
    }

    /// Writes `<split>.jsonl` for each split.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<[PathBuf; 3]> {
        let dir = dir.as_ref();
        let mut paths = Split::ALL.map(|s| dir.join(format!("{}.jsonl", s.name())));
        for (s, p) in Split::ALL.iter().zip(paths.iter_mut()) {
            write_manifest(&p, self.split(*s))?;
        }
        Ok(paths)
    }
}

/// Speaker id of a speech file: the stem up to its first underscore.
pub fn speaker_of(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    stem.split('_').next().unwrap_or(stem).to_string()
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    Ok(files)
}

/// Sizes of the three partitions of `n` items; each at least one.
fn partition_sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let total: f64 = ratios.iter().sum();
    let val = ((ratios[1] / total * n as f64).round() as usize).max(1);
    let test = ((ratios[2] / total * n as f64).round() as usize).max(1);
    [n - val - test, val, test]
}

fn partition<T: Clone>(items: &[T], ratios: [f64; 3], rng: &mut ChaCha8Rng) -> [Vec<T>; 3] {
    let mut shuffled = items.to_vec();
    shuffled.shuffle(rng);
    let [a, b, _] = partition_sizes(items.len(), ratios);
    [
        shuffled[..a].to_vec(),
        shuffled[a..a + b].to_vec(),
        shuffled[a + b..].to_vec(),
    ]
}

/// Splits speakers (by file naming) and noise files 70/20/10 and draws one
/// noise file, SNR and mixing seed per mixture. References are absolute
/// paths.
pub fn build_dataset(speech_dir: &Path, noise_dir: &Path, cfg: &DatasetConfig) -> Result<DatasetManifests> {
    let (lo, hi) = cfg.snr_range_db;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::Config(format!("bad SNR range {lo}..{hi}")));
    }
    if cfg.ratios.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::Config(format!("split ratios must be positive, got {:?}", cfg.ratios)));
    }
    if cfg.mixtures_per_utterance == 0 {
        return Err(Error::Config("mixtures_per_utterance must be positive".into()));
    }
    let mut by_speaker: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    for f in wav_files(speech_dir)? {
        let abs = fs::canonicalize(&f).map_err(|e| Error::io(&f, e))?;
        by_speaker.entry(speaker_of(&f)).or_default().push(abs);
    }
    if by_speaker.len() < 3 {
        return Err(Error::Dataset(format!(
            "{} speakers found in {}, at least 3 needed",
            by_speaker.len(),
            speech_dir.display()
        )));
    }
    let noises: Vec<PathBuf> = wav_files(noise_dir)?
        .iter()
        .map(|f| fs::canonicalize(f).map_err(|e| Error::io(f, e)))
        .collect::<Result<_>>()?;
    if noises.len() < 3 {
        return Err(Error::Dataset(format!(
            "{} noise files found in {}, at least 3 needed",
            noises.len(),
            noise_dir.display()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let speakers: Vec<String> = by_speaker.keys().cloned().collect();
    let spk_parts = partition(&speakers, cfg.ratios, &mut rng);
    let noise_parts = partition(&noises, cfg.ratios, &mut rng);
    let mut out = DatasetManifests::default();
    for ((split, spks), split_noises) in Split::ALL.iter().zip(spk_parts).zip(noise_parts) {
        let mut spks = spks;
        spks.sort();
        for spk in spks {
            for file in &by_speaker[&spk] {
                for k in 0..cfg.mixtures_per_utterance {
                    let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                    let noise = split_noises.choose(&mut rng).expect("nonempty partition");
                    out.split_mut(*split).push(MixtureSpec {
                        id: format!("{}_{stem}_{k}", split.name()),
                        speech_ref: file.to_string_lossy().into_owned(),
                        noise_ref: noise.to_string_lossy().into_owned(),
                        snr_db: if hi > lo { rng.gen_range(lo..=hi) } else { lo },
                        seed: rng.gen(),
                        split: *split,
                    });
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small() -> CorpusConfig {
        CorpusConfig {
            num_speakers: 10,
            utterances_per_speaker: 2,
            utterance_secs: (0.4, 0.6),
            num_noise_files: 6,
            noise_secs: 1.0,
            seed: 3,
        }
    }

    #[test]
    fn partition_sizes_follow_ratios() {
        assert_eq!(partition_sizes(10, [0.7, 0.2, 0.1]), [7, 2, 1]);
        assert_eq!(partition_sizes(3, [0.7, 0.2, 0.1]), [1, 1, 1]);
        assert_eq!(partition_sizes(20, [0.7, 0.2, 0.1]), [14, 4, 2]);
    }

    #[test]
    fn ten_speakers_split_seven_two_one_and_disjoint() {
        let dir = tempfile::tempdir().unwrap();
        let layout = synthesize_corpus(&small(), dir.path()).unwrap();
        let m = build_dataset(&layout.speech_dir, &layout.noise_dir, &DatasetConfig::default()).unwrap();
        let speakers = |s: Split| -> BTreeSet<String> {
            m.split(s).iter().map(|e| speaker_of(Path::new(&e.speech_ref))).collect()
        };
        let noises = |s: Split| -> BTreeSet<String> { m.split(s).iter().map(|e| e.noise_ref.clone()).collect() };
        let (tr, va, te) = (speakers(Split::Train), speakers(Split::Validation), speakers(Split::Test));
        assert_eq!((tr.len(), va.len(), te.len()), (7, 2, 1));
        assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        let (ntr, nva, nte) = (noises(Split::Train), noises(Split::Validation), noises(Split::Test));
        assert!(ntr.is_disjoint(&nva) && ntr.is_disjoint(&nte) && nva.is_disjoint(&nte));
        for s in Split::ALL {
            for e in m.split(s) {
                assert!((-10.0..=15.0).contains(&e.snr_db));
                assert_eq!(e.split, s);
            }
        }
    }

    #[test]
    fn same_seed_gives_identical_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let layout = synthesize_corpus(&small(), dir.path()).unwrap();
        let cfg = DatasetConfig::default();
        let a = build_dataset(&layout.speech_dir, &layout.noise_dir, &cfg).unwrap();
        let b = build_dataset(&layout.speech_dir, &layout.noise_dir, &cfg).unwrap();
        let pa = a.write(dir.path().join("a")).unwrap();
        let pb = b.write(dir.path().join("b")).unwrap();
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
        let other = build_dataset(&layout.speech_dir, &layout.noise_dir, &DatasetConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn too_few_speakers_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let layout = synthesize_corpus(&CorpusConfig { num_speakers: 2, ..small() }, dir.path()).unwrap();
        let err = build_dataset(&layout.speech_dir, &layout.noise_dir, &DatasetConfig::default()).unwrap_err();
        assert!(err.to_string().contains("at least 3"), "{err}");
    }

    #[test]
    fn snr_draws_cover_the_range() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig {
            utterances_per_speaker: 1,
            utterance_secs: (0.2, 0.2),
            ..small()
        };
        let layout = synthesize_corpus(&cfg, dir.path()).unwrap();
        let m = build_dataset(
            &layout.speech_dir,
            &layout.noise_dir,
            &DatasetConfig {
                mixtures_per_utterance: 30,
                ..Default::default()
            },
        )
        .unwrap();
        let snrs: Vec<f64> = Split::ALL.iter().flat_map(|s| m.split(*s).iter().map(|e| e.snr_db)).collect();
        let min = snrs.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = snrs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(min >= -10.0 && max <= 15.0);
        assert!(min < -8.0 && max > 13.0, "{min} {max}");
    }

    #[test]
    fn synthetic_speech_has_pauses_and_harmonics() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spk = Speaker {
            f0: 120.0,
            formant_scale: 1.0,
            tilt: 0.9,
        };
        let x = utterance(&spk, &mut rng, secs(2.0));
        let frame = 320;
        let energies: Vec<f64> = x.chunks(frame).map(|c| c.iter().map(|v| v * v).sum()).collect();
        let max = energies.iter().cloned().fold(0.0, f64::max);
        assert!(energies.iter().any(|e| *e < max * 1e-3));
        for kind in NOISE_TYPES {
            let n = noise_signal(kind, &mut rng, 4000);
            assert!(n.iter().all(|v| v.is_finite()) && n.iter().any(|v| *v != 0.0), "{kind}");
        }
    }
}
