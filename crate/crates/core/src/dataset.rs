//! Mixture manifests (one JSON object per line) and the aligned LPS frame
//! triples `(y, x, d)` they expand to.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::audio::wav::read_wav;
use crate::audio::{
    lps, mix_at_snr, stft, Mixture, Waveform, DEFAULT_FRAME_LEN, DEFAULT_HOP_LEN,
    DEFAULT_POWER_FLOOR,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// One mixing job. References are file paths, resolved against the
/// manifest's directory when relative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub id: String,
    pub speech_ref: String,
    pub noise_ref: String,
    pub snr_db: f64,
    pub seed: u64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Base directory for relative references.
    pub base: PathBuf,
    pub entries: Vec<MixtureSpec>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: MixtureSpec = serde_json::from_str(&line)
                .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), n + 1)))?;
            entries.push(entry);
        }
        Ok(Self {
            base: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            entries,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_manifest(path, &self.entries)
    }

    pub fn resolve(&self, reference: &str) -> PathBuf {
        let p = Path::new(reference);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn render(&self, entry: &MixtureSpec) -> Result<Mixture> {
        let speech = read_wav(self.resolve(&entry.speech_ref))?;
        let noise = read_wav(self.resolve(&entry.noise_ref))?;
        mix_at_snr(&speech, &noise, entry.snr_db, entry.seed)
            .map_err(|e| Error::Dataset(format!("mixture {}: {e}", entry.id)))
    }

    pub fn render_all(&self) -> Result<Vec<(String, Mixture)>> {
        self.entries
            .iter()
            .map(|e| Ok((e.id.clone(), self.render(e)?)))
            .collect()
    }
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[MixtureSpec]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

/// LPS frames of one waveform with the pipeline's default analysis.
pub fn lps_frames(wave: &Waveform) -> Result<Array2<f64>> {
    Ok(lps(&stft(wave, DEFAULT_FRAME_LEN, DEFAULT_HOP_LEN)?, DEFAULT_POWER_FLOOR)?.values)
}

/// Frame-aligned noisy, speech and noise LPS over a set of mixtures.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTriples {
    pub noisy: Array2<f64>,
    pub speech: Array2<f64>,
    pub noise: Array2<f64>,
    /// Frame range of each utterance, in input order.
    pub utterances: Vec<(String, Range<usize>)>,
}

impl FrameTriples {
    pub fn from_mixtures<'a>(mixtures: impl IntoIterator<Item = (&'a str, &'a Mixture)>) -> Result<Self> {
        let mut noisy = Vec::new();
        let mut speech = Vec::new();
        let mut noise = Vec::new();
        let mut utterances = Vec::new();
        let mut start = 0;
        for (id, m) in mixtures {
            let y = lps_frames(&m.noisy)?;
            let n = y.nrows();
            noisy.push(y);
            speech.push(lps_frames(&m.speech)?);
            noise.push(lps_frames(&m.noise)?);
            utterances.push((id.to_string(), start..start + n));
            start += n;
        }
        if utterances.is_empty() {
            return Err(Error::Dataset("no mixtures to extract frames from".into()));
        }
        let cat = |v: Vec<Array2<f64>>| {
            let views: Vec<_> = v.iter().map(|a| a.view()).collect();
            concatenate(Axis(0), &views).expect("equal bin counts")
        };
        Ok(Self {
            noisy: cat(noisy),
            speech: cat(speech),
            noise: cat(noise),
            utterances,
        })
    }

    pub fn from_manifest(manifest: &Manifest) -> Result<Self> {
        let rendered = manifest.render_all()?;
        Self::from_mixtures(rendered.iter().map(|(id, m)| (id.as_str(), m)))
    }

    pub fn len(&self) -> usize {
        self.noisy.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.noisy.nrows() == 0
    }

    pub fn num_bins(&self) -> usize {
        self.noisy.ncols()
    }
}
