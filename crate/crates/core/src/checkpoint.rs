//! Trained-model bundles on disk: `weights.safetensors` (little-endian f64
//! tensors) next to a `meta.json` sidecar carrying the specs, feature
//! normalization, config hash and seed.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{Decoder, DecoderSpec, Encoder, EncoderSpec, ParamGroup};
use crate::nn::Parameters;

pub const SCHEMA_VERSION: u32 = 1;
pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const META_FILE: &str = "meta.json";

const MIN_STD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// C-VAE, trained on clean speech.
    CleanVae,
    /// N-VAE, trained on noise.
    NoiseVae,
    /// NS-VAE, trained on mixtures.
    NoisyVae,
}

impl ModelKind {
    pub fn encoder_group(self) -> ParamGroup {
        match self {
            ModelKind::CleanVae => ParamGroup::SpeechEncoder,
            ModelKind::NoiseVae => ParamGroup::NoiseEncoder,
            ModelKind::NoisyVae => ParamGroup::NoisyEncoder,
        }
    }

    pub fn decoder_group(self) -> ParamGroup {
        match self {
            ModelKind::CleanVae => ParamGroup::SpeechDecoder,
            ModelKind::NoiseVae => ParamGroup::NoiseDecoder,
            ModelKind::NoisyVae => ParamGroup::NoisyDecoder,
        }
    }

    fn num_latents(self) -> usize {
        match self {
            ModelKind::NoisyVae => 2,
            _ => 1,
        }
    }
}

/// Per-feature standardization fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit(frames: ArrayView2<'_, f64>) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(Error::invalid("cannot fit normalization on zero frames"));
        }
        let mean = frames.mean_axis(Axis(0)).expect("non-empty");
        let std = frames.std_axis(Axis(0), 0.0);
        Ok(Self {
            mean: mean.to_vec(),
            std: std.iter().map(|&s| if s > MIN_STD { s } else { 1.0 }).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, frames: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = frames.to_owned();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    pub fn invert(&self, frames: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = frames.to_owned();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub kind: ModelKind,
    pub encoder: EncoderSpec,
    pub decoder: Option<DecoderSpec>,
    pub normalization: Normalization,
    pub config_hash: String,
    pub seed: u64,
    pub num_parameters: usize,
    /// Epochs of optimization behind these weights; 0 means untrained.
    pub epochs_trained: usize,
}

/// Encoder, optional decoder and the input normalization of one VAE.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub kind: ModelKind,
    pub encoder: Encoder,
    pub decoder: Option<Decoder>,
    pub normalization: Normalization,
}

impl VaeModel {
    pub fn new(
        kind: ModelKind,
        encoder: Encoder,
        decoder: Option<Decoder>,
        normalization: Normalization,
    ) -> Result<Self> {
        let model = Self {
            kind,
            encoder,
            decoder,
            normalization,
        };
        model.validate().map_err(Error::Config)?;
        Ok(model)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let enc = &self.encoder.spec;
        if enc.num_latents() != self.kind.num_latents() {
            return Err(format!(
                "{:?} needs {} latent head pairs, encoder has {}",
                self.kind,
                self.kind.num_latents(),
                enc.num_latents()
            ));
        }
        if self.normalization.dim() != enc.input_len || self.normalization.std.len() != enc.input_len {
            return Err(format!(
                "normalization has {} features, encoder reads {}",
                self.normalization.dim(),
                enc.input_len
            ));
        }
        if let Some(dec) = &self.decoder {
            let d = &dec.spec;
            if d.latent_dim != enc.latent_dim || d.latent_channels != enc.num_latents() {
                return Err("decoder latent layout does not match the encoder".into());
            }
            if d.out_dim != enc.input_len {
                return Err(format!(
                    "decoder emits {} bins, encoder reads {}",
                    d.out_dim, enc.input_len
                ));
            }
        } else if self.kind != ModelKind::NoisyVae {
            return Err(format!("{:?} requires a decoder", self.kind));
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.encoder.num_parameters() + self.decoder.as_ref().map_or(0, |d| d.num_parameters())
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.spec.latent_dim
    }

    pub fn num_bins(&self) -> usize {
        self.encoder.spec.input_len
    }

    fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<_> = self
            .encoder
            .tensors()
            .into_iter()
            .map(|(n, s, v)| (format!("encoder.{n}"), s, v))
            .collect();
        if let Some(dec) = &self.decoder {
            out.extend(
                dec.tensors()
                    .into_iter()
                    .map(|(n, s, v)| (format!("decoder.{n}"), s, v)),
            );
        }
        out
    }

    pub fn save(&self, dir: impl AsRef<Path>, config_hash: &str, seed: u64, epochs_trained: usize) -> Result<CheckpointMeta> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tensors = self.named_tensors();
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
            .into_iter()
            .map(|(n, s, v)| (n, s, v.iter().flat_map(|x| x.to_le_bytes()).collect()))
            .collect();
        let views = bytes
            .iter()
            .map(|(n, s, b)| Ok((n.clone(), TensorView::new(Dtype::F64, s.clone(), b)?)))
            .collect::<Result<Vec<_>>>()?;
        let blob = safetensors::tensor::serialize(views, &None)?;
        let weights = dir.join(WEIGHTS_FILE);
        fs::write(&weights, blob).map_err(|e| Error::io(&weights, e))?;
        let meta = CheckpointMeta {
            schema_version: SCHEMA_VERSION,
            kind: self.kind,
            encoder: self.encoder.spec.clone(),
            decoder: self.decoder.as_ref().map(|d| d.spec.clone()),
            normalization: self.normalization.clone(),
            config_hash: config_hash.to_string(),
            seed,
            num_parameters: self.num_parameters(),
            epochs_trained,
        };
        let path = dir.join(META_FILE);
        let text = serde_json::to_string_pretty(&meta)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(meta)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, CheckpointMeta)> {
        let dir = dir.as_ref();
        let meta = read_meta(dir)?;
        let bad = |reason: String| Error::Checkpoint {
            path: dir.to_path_buf(),
            reason,
        };
        // construction rng is irrelevant: every tensor is overwritten below
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let encoder = Encoder::new(meta.encoder.clone(), &mut rng).map_err(|e| bad(e.to_string()))?;
        let decoder = meta
            .decoder
            .clone()
            .map(|s| Decoder::new(s, &mut rng))
            .transpose()
            .map_err(|e| bad(e.to_string()))?;
        let mut model = VaeModel::new(meta.kind, encoder, decoder, meta.normalization.clone())
            .map_err(|e| bad(e.to_string()))?;

        let path = dir.join(WEIGHTS_FILE);
        let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let archive = SafeTensors::deserialize(&blob)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .named_tensors()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        let names: BTreeSet<String> = archive.names().into_iter().cloned().collect();
        let wanted: BTreeSet<String> = expected.iter().map(|(n, _)| n.clone()).collect();
        if let Some(extra) = names.difference(&wanted).next() {
            return Err(bad(format!("unexpected tensor {extra}")));
        }
        let mut values: HashMap<String, Vec<f64>> = HashMap::new();
        for (name, shape) in &expected {
            let t = archive
                .tensor(name)
                .map_err(|_| bad(format!("missing tensor {name}")))?;
            if t.dtype() != Dtype::F64 {
                return Err(bad(format!("tensor {name} has dtype {:?}, expected F64", t.dtype())));
            }
            if t.shape() != shape.as_slice() {
                return Err(bad(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            let v: Vec<f64> = t
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if v.iter().any(|x| !x.is_finite()) {
                return Err(bad(format!("tensor {name} holds non-finite values")));
            }
            values.insert(name.clone(), v);
        }
        let mut slots = model.encoder.tensors_mut();
        if let Some(d) = model.decoder.as_mut() {
            slots.extend(d.tensors_mut());
        }
        for (slot, (name, _)) in slots.into_iter().zip(&expected) {
            slot.copy_from_slice(&values[name]);
        }
        if model.num_parameters() != meta.num_parameters {
            return Err(bad(format!(
                "meta records {} parameters, weights hold {}",
                meta.num_parameters,
                model.num_parameters()
            )));
        }
        Ok((model, meta))
    }
}

pub fn read_meta(dir: impl AsRef<Path>) -> Result<CheckpointMeta> {
    let dir = dir.as_ref();
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Checkpoint {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if meta.schema_version != SCHEMA_VERSION {
        return Err(Error::Checkpoint {
            path,
            reason: format!(
                "schema version {} (supported: {SCHEMA_VERSION})",
                meta.schema_version
            ),
        });
    }
    Ok(meta)
}

/// Loads a checkpoint and insists on its kind.
pub fn load_kind(dir: impl AsRef<Path>, kind: ModelKind) -> Result<(VaeModel, CheckpointMeta)> {
    let dir = dir.as_ref();
    let (model, meta) = VaeModel::load(dir)?;
    if model.kind != kind {
        return Err(Error::Checkpoint {
            path: PathBuf::from(dir),
            reason: format!("expected a {kind:?} checkpoint, found {:?}", model.kind),
        });
    }
    Ok((model, meta))
}
