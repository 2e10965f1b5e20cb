//! Two-stage training: the speech and noise VAEs are pre-trained on their
//! own signals, then the noisy-speech VAE is trained against their frozen
//! encoders.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_kind, ModelKind, Normalization, VaeModel};
use crate::dataset::FrameTriples;
use crate::error::{Error, Result};
use crate::gaussian::DiagonalGaussian;
use crate::losses::{
    beta_pvae_loss_grad, vae_loss_grad, ExpectationMode, LatentNoise, LatentPosteriors,
    LossBreakdown, Reconstruction,
};
use crate::networks::{
    Decoder, DecoderSpec, Encoder, EncoderSpec, GaussianBatch, DECODER_CHANNELS, ENCODER_CHANNELS,
    KERNEL, LATENT_DIM, NUM_BINS,
};
use crate::nn::{Adam, AdamConfig, Parameters};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const REPORT_FILE: &str = "report.json";

/// Stream ids carved out of the run seed.
const SHUFFLE_STREAM: u64 = 1;
const VALIDATION_STREAM: u64 = 2;
/// Frames per forward pass outside of training.
const EVAL_CHUNK: usize = 256;

impl Parameters for VaeModel {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<_> = self
            .encoder
            .tensors()
            .into_iter()
            .map(|(n, s, v)| (format!("encoder.{n}"), s, v))
            .collect();
        if let Some(d) = &self.decoder {
            out.extend(d.tensors().into_iter().map(|(n, s, v)| (format!("decoder.{n}"), s, v)));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.tensors_mut();
        if let Some(d) = &mut self.decoder {
            out.extend(d.tensors_mut());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Cvae,
    Nvae,
    Nsvae,
}

impl Stage {
    pub fn kind(self) -> ModelKind {
        match self {
            Stage::Cvae => ModelKind::CleanVae,
            Stage::Nvae => ModelKind::NoiseVae,
            Stage::Nsvae => ModelKind::NoisyVae,
        }
    }
}

/// Weight ratio `beta : alpha`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gamma {
    Finite(f64),
    Infinite,
}

impl Gamma {
    /// `(alpha, beta)`: alpha stays 1 for finite ratios; infinity means
    /// alpha = 0, beta = 1.
    pub fn weights(self) -> (f64, f64) {
        match self {
            Gamma::Finite(g) => (1.0, g),
            Gamma::Infinite => (0.0, 1.0),
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Gamma::Finite(g) => g,
            Gamma::Infinite => f64::INFINITY,
        }
    }

    pub fn label(self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Gamma {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Gamma::Finite(g) => write!(f, "{g}"),
            Gamma::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Gamma {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if matches!(t, "inf" | "+inf" | "infinity" | "∞") {
            return Ok(Gamma::Infinite);
        }
        let v: f64 = t
            .parse()
            .map_err(|_| Error::Config(format!("gamma must be a positive number or \"inf\", got {s:?}")))?;
        if v.is_infinite() && v > 0.0 {
            return Ok(Gamma::Infinite);
        }
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Config(format!("gamma must be positive, got {s:?}")));
        }
        Ok(Gamma::Finite(v))
    }
}

impl Serialize for Gamma {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Gamma::Finite(g) => s.serialize_f64(*g),
            Gamma::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Gamma {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Gamma::from_str(&v.to_string()),
            Raw::Str(s) => Gamma::from_str(&s),
        }
        .map_err(serde::de::Error::custom)
    }
}

/// Layer widths shared by the three VAEs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub num_bins: usize,
    pub latent_dim: usize,
    pub encoder_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    pub kernel: usize,
    pub learned_variance: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            num_bins: NUM_BINS,
            latent_dim: LATENT_DIM,
            encoder_channels: ENCODER_CHANNELS.to_vec(),
            decoder_channels: DECODER_CHANNELS.to_vec(),
            kernel: KERNEL,
            learned_variance: true,
        }
    }
}

impl ArchConfig {
    pub fn encoder_spec(&self, kind: ModelKind) -> EncoderSpec {
        EncoderSpec {
            input_len: self.num_bins,
            conv_channels: self.encoder_channels.clone(),
            kernel: self.kernel,
            latent_dim: self.latent_dim,
            num_heads: if kind == ModelKind::NoisyVae { 4 } else { 2 },
        }
    }

    pub fn decoder_spec(&self, kind: ModelKind) -> DecoderSpec {
        DecoderSpec {
            latent_dim: self.latent_dim,
            latent_channels: if kind == ModelKind::NoisyVae { 2 } else { 1 },
            conv_channels: self.decoder_channels.clone(),
            kernel: self.kernel,
            out_dim: self.num_bins,
            learned_variance: self.learned_variance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub alpha: f64,
    pub beta: f64,
    pub gamma_label: String,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early-stopping patience in epochs.
    pub patience: usize,
    /// Epochs without improvement before the learning rate is halved.
    pub lr_patience: usize,
    pub seed: u64,
    pub expectation: ExpectationMode,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Cvae,
            alpha: 1.0,
            beta: 1.0,
            gamma_label: "1".into(),
            optimizer: AdamConfig::default(),
            batch_size: 128,
            max_epochs: 100,
            patience: 10,
            lr_patience: 3,
            seed: 0,
            expectation: ExpectationMode::Analytic,
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        Self {
            stage,
            ..Self::default()
        }
    }

    pub fn with_gamma(mut self, gamma: Gamma) -> Self {
        let (alpha, beta) = gamma.weights();
        self.alpha = alpha;
        self.beta = beta;
        self.gamma_label = gamma.label();
        self
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || (self.alpha == 0.0 && self.beta == 0.0) {
            return bad(format!("invalid weights alpha {} beta {}", self.alpha, self.beta));
        }
        if self.stage != Stage::Nsvae && self.alpha != 1.0 {
            return bad("alpha applies to the noisy-speech stage only".into());
        }
        if !(self.optimizer.lr > 0.0) {
            return bad("learning rate must be positive".into());
        }
        if self.lr_patience == 0 {
            return bad("lr_patience must be positive".into());
        }
        let kind = self.stage.kind();
        self.arch.encoder_spec(kind).validate()?;
        self.arch.decoder_spec(kind).validate()?;
        Ok(())
    }

    pub fn gamma(&self) -> f64 {
        if self.alpha == 0.0 {
            f64::INFINITY
        } else {
            self.beta / self.alpha
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Absent for epoch 0, the evaluation of the initial weights.
    pub train: Option<LossBreakdown>,
    pub validation: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    pub gamma_label: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub checkpoint_path: PathBuf,
    pub num_parameters: usize,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn best(&self) -> &EpochRecord {
        self.epochs
            .iter()
            .find(|e| e.epoch == self.best_epoch)
            .expect("best epoch is recorded")
    }

    pub fn initial(&self) -> &EpochRecord {
        &self.epochs[0]
    }
}

fn standard_normal<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Adds the reparameterization path `z = mean + exp(lv / 2) * eps` of `dz`
/// into the head gradients.
fn add_sample_path(d_mean: &mut Array2<f64>, d_lv: &mut Array2<f64>, log_var: &Array2<f64>, eps: &Array2<f64>, dz: ArrayView2<'_, f64>) {
    *d_mean += &dz;
    ndarray::Zip::from(d_lv)
        .and(log_var)
        .and(eps)
        .and(dz)
        .for_each(|g, &lv, &e, &d| *g += d * e * 0.5 * (0.5 * lv).exp());
}

fn gaussian_row(mean: &Array2<f64>, log_var: &Array2<f64>, i: usize) -> DiagonalGaussian {
    DiagonalGaussian {
        mean: mean.row(i).to_vec(),
        log_var: log_var.row(i).to_vec(),
    }
}

fn accumulate(acc: &mut LossBreakdown, b: &LossBreakdown, scale: f64) {
    acc.total += scale * b.total;
    acc.kl_speech += scale * b.kl_speech;
    acc.kl_noise += scale * b.kl_noise;
    acc.latent_ratio_speech += scale * b.latent_ratio_speech;
    acc.latent_ratio_noise += scale * b.latent_ratio_noise;
    acc.reconstruction += scale * b.reconstruction;
}

fn weighted_mean(parts: &[(LossBreakdown, usize)]) -> LossBreakdown {
    let n: usize = parts.iter().map(|(_, k)| k).sum();
    let mut acc = parts[0].0;
    acc.total = 0.0;
    acc.kl_speech = 0.0;
    acc.kl_noise = 0.0;
    acc.latent_ratio_speech = 0.0;
    acc.latent_ratio_noise = 0.0;
    acc.reconstruction = 0.0;
    for (b, k) in parts {
        accumulate(&mut acc, b, *k as f64 / n as f64);
    }
    acc
}

/// Frame-averaged VAE loss of a batch of normalized frames and its gradient
/// with respect to every encoder and decoder parameter. `eps` holds one
/// standard-normal row per frame.
pub fn vae_batch_grad(
    model: &VaeModel,
    x: ArrayView2<'_, f64>,
    eps: &Array2<f64>,
    beta: f64,
) -> Result<(LossBreakdown, VaeModel)> {
    let decoder = model
        .decoder
        .as_ref()
        .ok_or_else(|| Error::invalid("VAE loss needs a decoder"))?;
    let b = x.nrows();
    let (heads, enc_cache) = model.encoder.forward(x)?;
    let post = GaussianBatch {
        mean: heads[0].clone(),
        log_var: heads[1].clone(),
    };
    if eps.dim() != post.mean.dim() {
        return Err(Error::Shape(format!("eps is {:?}, latents are {:?}", eps.dim(), post.mean.dim())));
    }
    let z = post.sample(eps);
    let (lik, dec_cache) = decoder.forward(z.view())?;
    let prior = DiagonalGaussian::standard(post.dim());
    let scale = 1.0 / b as f64;
    let mut total = LossBreakdown::default();
    let mut d_mean = Array2::zeros(post.mean.dim());
    let mut d_lv = Array2::zeros(post.mean.dim());
    let mut dl_mean = Array2::zeros(lik.mean.dim());
    let mut dl_lv = Array2::zeros(lik.mean.dim());
    for i in 0..b {
        let target = x.row(i).to_vec();
        let (l, g) = vae_loss_grad(
            &post.get(i),
            &prior,
            &gaussian_row(&lik.mean, &lik.log_var, i),
            &target,
            beta,
        )?;
        if i == 0 {
            total = l;
            total.total = 0.0;
            total.kl_speech = 0.0;
            total.reconstruction = 0.0;
        }
        accumulate(&mut total, &l, scale);
        d_mean.row_mut(i).assign(&ndarray::aview1(&g.posterior.mean));
        d_lv.row_mut(i).assign(&ndarray::aview1(&g.posterior.log_var));
        dl_mean.row_mut(i).assign(&ndarray::aview1(&g.likelihood.mean));
        dl_lv.row_mut(i).assign(&ndarray::aview1(&g.likelihood.log_var));
    }
    for a in [&mut d_mean, &mut d_lv, &mut dl_mean, &mut dl_lv] {
        *a *= scale;
    }
    let (dec_grad, dz) = decoder.backward(&dec_cache, &dl_mean, &dl_lv);
    add_sample_path(&mut d_mean, &mut d_lv, &post.log_var, eps, dz.view());
    let enc_grad = model.encoder.backward(&enc_cache, &[d_mean, d_lv]);
    Ok((
        total,
        VaeModel {
            kind: model.kind,
            encoder: enc_grad,
            decoder: Some(dec_grad),
            normalization: model.normalization.clone(),
        },
    ))
}

/// Weights and estimator settings of the noisy-speech objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisyObjective {
    pub alpha: f64,
    pub beta: f64,
    pub expectation: ExpectationMode,
}

impl NoisyObjective {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            alpha: cfg.alpha,
            beta: cfg.beta,
            expectation: cfg.expectation,
        }
    }

    /// Whether a batch needs latent noise draws.
    pub fn needs_eps(&self) -> bool {
        self.alpha > 0.0 || self.expectation == ExpectationMode::SingleSample
    }
}

/// Frame-averaged noisy-speech loss of a batch and its parameter gradient.
/// `teachers` are the frozen clean-speech and noise posteriors of the same
/// frames. With `alpha = 0` the decoder is neither evaluated nor required,
/// and the returned gradient has no decoder.
pub fn nsvae_batch_grad(
    model: &VaeModel,
    y: ArrayView2<'_, f64>,
    teachers: (&GaussianBatch, &GaussianBatch),
    eps: Option<(&Array2<f64>, &Array2<f64>)>,
    objective: NoisyObjective,
) -> Result<(LossBreakdown, VaeModel)> {
    let NoisyObjective {
        alpha,
        beta,
        expectation,
    } = objective;
    let b = y.nrows();
    let (heads, enc_cache) = model.encoder.forward(y)?;
    if heads.len() != 4 {
        return Err(Error::invalid("noisy-speech encoder must have four heads"));
    }
    let (ms, lvs, mn, lvn) = (&heads[0], &heads[1], &heads[2], &heads[3]);
    let dim = ms.ncols();
    if teachers.0.len() != b || teachers.1.len() != b {
        return Err(Error::Shape(format!(
            "{b} frames but {} / {} teacher posteriors",
            teachers.0.len(),
            teachers.1.len()
        )));
    }
    if objective.needs_eps() {
        let (es, en) = eps.ok_or_else(|| Error::invalid("this objective needs latent noise"))?;
        if es.dim() != ms.dim() || en.dim() != ms.dim() {
            return Err(Error::Shape("latent noise does not match the latent batch".into()));
        }
    }
    let single = expectation == ExpectationMode::SingleSample;

    let mut decoded = None;
    if alpha > 0.0 {
        let decoder = model
            .decoder
            .as_ref()
            .ok_or_else(|| Error::invalid("alpha > 0 requires the noisy-speech decoder"))?;
        let (es, en) = eps.expect("checked above");
        let zs = GaussianBatch { mean: ms.clone(), log_var: lvs.clone() }.sample(es);
        let zn = GaussianBatch { mean: mn.clone(), log_var: lvn.clone() }.sample(en);
        let z = concatenate(Axis(1), &[zs.view(), zn.view()]).expect("same batch");
        decoded = Some((decoder, decoder.forward(z.view())?));
    }

    let prior = DiagonalGaussian::standard(dim);
    let scale = 1.0 / b as f64;
    let mut total = LossBreakdown::default();
    let mut d = [
        Array2::zeros(ms.dim()),
        Array2::zeros(ms.dim()),
        Array2::zeros(ms.dim()),
        Array2::zeros(ms.dim()),
    ];
    let out_dim = model.encoder.spec.input_len;
    let mut dl_mean = Array2::zeros((b, out_dim));
    let mut dl_lv = Array2::zeros((b, out_dim));
    for i in 0..b {
        let ys = gaussian_row(ms, lvs, i);
        let yn = gaussian_row(mn, lvn, i);
        let cs = teachers.0.get(i);
        let cn = teachers.1.get(i);
        let lik = decoded
            .as_ref()
            .map(|(_, (l, _))| gaussian_row(&l.mean, &l.log_var, i));
        let target = y.row(i).to_vec();
        let recon = lik.as_ref().map(|l| Reconstruction {
            likelihood: l,
            target: &target,
        });
        let rows = eps.map(|(es, en)| (es.row(i).to_vec(), en.row(i).to_vec()));
        let noise = if single {
            rows.as_ref().map(|(s, n)| LatentNoise { speech: s, noise: n })
        } else {
            None
        };
        let (l, g) = beta_pvae_loss_grad(
            LatentPosteriors {
                noisy_speech: &ys,
                noisy_noise: &yn,
                clean_speech: &cs,
                clean_noise: &cn,
            },
            &prior,
            recon,
            alpha,
            beta,
            noise,
        )?;
        if i == 0 {
            total = l;
            for v in [
                &mut total.total,
                &mut total.kl_speech,
                &mut total.kl_noise,
                &mut total.latent_ratio_speech,
                &mut total.latent_ratio_noise,
                &mut total.reconstruction,
            ] {
                *v = 0.0;
            }
        }
        accumulate(&mut total, &l, scale);
        d[0].row_mut(i).assign(&ndarray::aview1(&g.noisy_speech.mean));
        d[1].row_mut(i).assign(&ndarray::aview1(&g.noisy_speech.log_var));
        d[2].row_mut(i).assign(&ndarray::aview1(&g.noisy_noise.mean));
        d[3].row_mut(i).assign(&ndarray::aview1(&g.noisy_noise.log_var));
        if let Some(gl) = g.likelihood {
            dl_mean.row_mut(i).assign(&ndarray::aview1(&gl.mean));
            dl_lv.row_mut(i).assign(&ndarray::aview1(&gl.log_var));
        }
    }
    for a in d.iter_mut() {
        *a *= scale;
    }
    let mut dec_grad = None;
    if let Some((decoder, (_, cache))) = &decoded {
        dl_mean *= scale;
        dl_lv *= scale;
        let (g, dz) = decoder.backward(cache, &dl_mean, &dl_lv);
        let (es, en) = eps.expect("checked above");
        let [d0, d1, d2, d3] = &mut d;
        add_sample_path(d0, d1, lvs, es, dz.slice(s![.., ..dim]));
        add_sample_path(d2, d3, lvn, en, dz.slice(s![.., dim..]));
        dec_grad = Some(g);
    }
    let enc_grad = model.encoder.backward(&enc_cache, &d);
    Ok((
        total,
        VaeModel {
            kind: model.kind,
            encoder: enc_grad,
            decoder: dec_grad,
            normalization: model.normalization.clone(),
        },
    ))
}

/// Posteriors of a teacher on raw (unnormalized) LPS frames.
pub fn teacher_posteriors(teacher: &VaeModel, frames: ArrayView2<'_, f64>) -> Result<GaussianBatch> {
    let normalized = teacher.normalization.apply(frames);
    encode_chunked(&teacher.encoder, normalized.view()).map(|mut v| v.swap_remove(0))
}

/// Encoder outputs for many frames, evaluated in fixed-size chunks.
pub fn encode_chunked(encoder: &Encoder, x: ArrayView2<'_, f64>) -> Result<Vec<GaussianBatch>> {
    let mut parts: Vec<Vec<GaussianBatch>> = Vec::new();
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + EVAL_CHUNK).min(x.nrows());
        parts.push(encoder.encode(x.slice(s![start..end, ..]))?);
        start = end;
    }
    let heads = encoder.spec.num_latents();
    Ok((0..heads)
        .map(|h| {
            let means: Vec<_> = parts.iter().map(|p| p[h].mean.view()).collect();
            let lvs: Vec<_> = parts.iter().map(|p| p[h].log_var.view()).collect();
            GaussianBatch {
                mean: concatenate(Axis(0), &means).expect("same width"),
                log_var: concatenate(Axis(0), &lvs).expect("same width"),
            }
        })
        .collect())
}

/// Decoder outputs for many latent rows, evaluated in fixed-size chunks.
pub fn decode_chunked(decoder: &Decoder, z: ArrayView2<'_, f64>) -> Result<GaussianBatch> {
    let mut means = Vec::new();
    let mut lvs = Vec::new();
    let mut start = 0;
    while start < z.nrows() {
        let end = (start + EVAL_CHUNK).min(z.nrows());
        let out = decoder.decode(z.slice(s![start..end, ..]))?;
        means.push(out.mean);
        lvs.push(out.log_var);
        start = end;
    }
    let mv: Vec<_> = means.iter().map(|a| a.view()).collect();
    let lv: Vec<_> = lvs.iter().map(|a| a.view()).collect();
    Ok(GaussianBatch {
        mean: concatenate(Axis(0), &mv).map_err(|e| Error::Shape(e.to_string()))?,
        log_var: concatenate(Axis(0), &lv).map_err(|e| Error::Shape(e.to_string()))?,
    })
}

/// Training data with normalization already applied.
enum Job {
    Teacher {
        train: Array2<f64>,
        val: Array2<f64>,
        beta: f64,
    },
    Noisy {
        train: Array2<f64>,
        train_teachers: (GaussianBatch, GaussianBatch),
        val: Array2<f64>,
        val_teachers: (GaussianBatch, GaussianBatch),
        objective: NoisyObjective,
    },
}

impl Job {
    fn train_len(&self) -> usize {
        match self {
            Job::Teacher { train, .. } | Job::Noisy { train, .. } => train.nrows(),
        }
    }

    fn batch(&self, model: &VaeModel, rows: &[usize], split_val: bool, rng: &mut ChaCha8Rng) -> Result<(LossBreakdown, VaeModel)> {
        let dim = model.latent_dim();
        match self {
            Job::Teacher { train, val, beta } => {
                let x = if split_val { val } else { train }.select(Axis(0), rows);
                let eps = standard_normal(rng, rows.len(), dim);
                vae_batch_grad(model, x.view(), &eps, *beta)
            }
            Job::Noisy {
                train,
                train_teachers,
                val,
                val_teachers,
                objective,
            } => {
                let (y, t) = if split_val { (val, val_teachers) } else { (train, train_teachers) };
                let y = y.select(Axis(0), rows);
                let ts = t.0.select(rows);
                let tn = t.1.select(rows);
                let eps = objective
                    .needs_eps()
                    .then(|| (standard_normal(rng, rows.len(), dim), standard_normal(rng, rows.len(), dim)));
                nsvae_batch_grad(model, y.view(), (&ts, &tn), eps.as_ref().map(|(a, b)| (a, b)), *objective)
            }
        }
    }

    /// Loss over the whole validation split with a fixed noise stream.
    fn validate(&self, model: &VaeModel, seed: u64) -> Result<LossBreakdown> {
        let n = match self {
            Job::Teacher { val, .. } | Job::Noisy { val, .. } => val.nrows(),
        };
        if n == 0 {
            return Err(Error::Dataset("validation split has no frames".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(VALIDATION_STREAM);
        let idx: Vec<usize> = (0..n).collect();
        let parts = idx
            .chunks(EVAL_CHUNK)
            .map(|rows| Ok((self.batch(model, rows, true, &mut rng)?.0, rows.len())))
            .collect::<Result<Vec<_>>>()?;
        Ok(weighted_mean(&parts))
    }
}

fn diverged(epoch: usize, err: Error, last_good: &Path) -> Error {
    let term = match err {
        Error::NonFinite(t) => t,
        other => return other,
    };
    Error::Diverged {
        epoch,
        term,
        last_good: Some(last_good.to_path_buf()),
    }
}

struct Logger {
    file: fs::File,
    path: PathBuf,
}

impl Logger {
    fn create(dir: &Path) -> Result<Self> {
        let path = dir.join(LOG_FILE);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { file, path })
    }

    fn write(&mut self, value: serde_json::Value) -> Result<()> {
        let mut line = serde_json::to_vec(&value)?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| Error::io(&self.path, e))
    }
}

fn run(cfg: &TrainConfig, mut model: VaeModel, epochs_before: usize, job: Job, out_dir: &Path) -> Result<TrainReport> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let hash = cfg.hash();
    let mut log = Logger::create(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);

    let initial = job.validate(&model, cfg.seed).map_err(|e| diverged(0, e, out_dir))?;
    model.save(out_dir, &hash, cfg.seed, epochs_before)?;
    let mut records = vec![EpochRecord {
        epoch: 0,
        lr: cfg.optimizer.lr,
        train: None,
        validation: initial,
    }];
    log.write(serde_json::json!({ "event": "epoch", "record": &records[0] }))?;

    let mut adam = Adam::new(cfg.optimizer, &model);
    let mut best = initial.total;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..job.train_len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut parts = Vec::new();
        for (step, rows) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, grad) = job
                .batch(&model, rows, false, &mut rng)
                .map_err(|e| diverged(epoch, e, out_dir))?;
            if !grad.all_finite() {
                return Err(diverged(epoch, Error::NonFinite("gradient".into()), out_dir));
            }
            adam.step(&mut model, &grad);
            log.write(serde_json::json!({ "event": "step", "epoch": epoch, "step": step, "loss": loss }))?;
            parts.push((loss, rows.len()));
        }
        if !model.all_finite() {
            return Err(diverged(epoch, Error::NonFinite("parameters".into()), out_dir));
        }
        let validation = job.validate(&model, cfg.seed).map_err(|e| diverged(epoch, e, out_dir))?;
        let record = EpochRecord {
            epoch,
            lr: adam.config.lr,
            train: (!parts.is_empty()).then(|| weighted_mean(&parts)),
            validation,
        };
        log.write(serde_json::json!({ "event": "epoch", "record": &record }))?;
        log::info!(
            "{:?} gamma {} epoch {epoch}: train {:.4} val {:.4}",
            cfg.stage,
            cfg.gamma_label,
            record.train.map_or(f64::NAN, |t| t.total),
            validation.total
        );
        records.push(record);
        if validation.total < best {
            best = validation.total;
            best_epoch = epoch;
            since_best = 0;
            model.save(out_dir, &hash, cfg.seed, epochs_before + epoch)?;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
            if since_best % cfg.lr_patience == 0 {
                adam.config.lr *= 0.5;
            }
        }
    }
    let report = TrainReport {
        stage: cfg.stage,
        gamma_label: cfg.gamma_label.clone(),
        epochs: records,
        best_epoch,
        checkpoint_path: out_dir.to_path_buf(),
        num_parameters: model.num_parameters(),
        stopped_early,
    };
    let path = out_dir.join(REPORT_FILE);
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

/// Freshly initialized model for `cfg`, seeded by `cfg.seed`.
pub fn init_model(cfg: &TrainConfig, normalization: Normalization) -> Result<VaeModel> {
    let kind = cfg.stage.kind();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let encoder = Encoder::new(cfg.arch.encoder_spec(kind), &mut rng)?;
    let with_decoder = kind != ModelKind::NoisyVae || cfg.alpha > 0.0;
    let decoder = with_decoder
        .then(|| Decoder::new(cfg.arch.decoder_spec(kind), &mut rng))
        .transpose()?;
    VaeModel::new(kind, encoder, decoder, normalization)
}

fn check_frames(frames: &FrameTriples, cfg: &TrainConfig, what: &str) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::Dataset(format!("{what} split has no frames")));
    }
    if frames.num_bins() != cfg.arch.num_bins {
        return Err(Error::Dataset(format!(
            "{what} frames have {} bins, architecture expects {}",
            frames.num_bins(),
            cfg.arch.num_bins
        )));
    }
    Ok(())
}

fn teacher_frames(frames: &FrameTriples, kind: ModelKind) -> &Array2<f64> {
    match kind {
        ModelKind::CleanVae => &frames.speech,
        _ => &frames.noise,
    }
}

fn train_teacher(cfg: &TrainConfig, stage: Stage, train: &FrameTriples, val: &FrameTriples, out_dir: &Path, init: Option<(VaeModel, usize)>) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.stage != stage {
        return Err(Error::Config(format!("config is for stage {:?}, not {stage:?}", cfg.stage)));
    }
    check_frames(train, cfg, "training")?;
    check_frames(val, cfg, "validation")?;
    let kind = stage.kind();
    let (model, before) = match init {
        Some(m) => m,
        None => (init_model(cfg, Normalization::fit(teacher_frames(train, kind).view())?)?, 0),
    };
    let norm = &model.normalization;
    let job = Job::Teacher {
        train: norm.apply(teacher_frames(train, kind).view()),
        val: norm.apply(teacher_frames(val, kind).view()),
        beta: cfg.beta,
    };
    run(cfg, model, before, job, out_dir)
}

/// Trains the clean-speech VAE on the speech component of the mixtures.
pub fn pretrain_clean_vae(cfg: &TrainConfig, train: &FrameTriples, val: &FrameTriples, out_dir: impl AsRef<Path>) -> Result<TrainReport> {
    train_teacher(cfg, Stage::Cvae, train, val, out_dir.as_ref(), None)
}

/// Trains the noise VAE on the noise component of the mixtures.
pub fn pretrain_noise_vae(cfg: &TrainConfig, train: &FrameTriples, val: &FrameTriples, out_dir: impl AsRef<Path>) -> Result<TrainReport> {
    train_teacher(cfg, Stage::Nvae, train, val, out_dir.as_ref(), None)
}

/// Loads and cross-checks the two frozen teachers.
pub fn load_teachers(cvae: &Path, nvae: &Path) -> Result<(VaeModel, VaeModel)> {
    let (c, _) = load_kind(cvae, ModelKind::CleanVae)?;
    let (n, _) = load_kind(nvae, ModelKind::NoiseVae)?;
    if c.latent_dim() != n.latent_dim() || c.num_bins() != n.num_bins() {
        return Err(Error::Checkpoint {
            path: nvae.to_path_buf(),
            reason: "clean and noise VAEs disagree on latent or frame size".into(),
        });
    }
    Ok((c, n))
}

fn noisy_job(cfg: &TrainConfig, model: &VaeModel, teachers: &(VaeModel, VaeModel), train: &FrameTriples, val: &FrameTriples) -> Result<Job> {
    let (c, n) = teachers;
    if c.latent_dim() != model.latent_dim() || c.num_bins() != model.num_bins() {
        return Err(Error::Config(format!(
            "teachers use L = {}, F = {}; noisy-speech VAE uses L = {}, F = {}",
            c.latent_dim(),
            c.num_bins(),
            model.latent_dim(),
            model.num_bins()
        )));
    }
    let norm = &model.normalization;
    Ok(Job::Noisy {
        train: norm.apply(train.noisy.view()),
        train_teachers: (teacher_posteriors(c, train.speech.view())?, teacher_posteriors(n, train.noise.view())?),
        val: norm.apply(val.noisy.view()),
        val_teachers: (teacher_posteriors(c, val.speech.view())?, teacher_posteriors(n, val.noise.view())?),
        objective: NoisyObjective::from_config(cfg),
    })
}

/// Trains the noisy-speech VAE against frozen teachers. With `alpha = 0`
/// no decoder is created and the checkpoint holds encoder weights only.
pub fn train_nsvae(
    cfg: &TrainConfig,
    train: &FrameTriples,
    val: &FrameTriples,
    cvae: impl AsRef<Path>,
    nvae: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.stage != Stage::Nsvae {
        return Err(Error::Config(format!("config is for stage {:?}, not Nsvae", cfg.stage)));
    }
    let teachers = load_teachers(cvae.as_ref(), nvae.as_ref())?;
    check_frames(train, cfg, "training")?;
    check_frames(val, cfg, "validation")?;
    let model = init_model(cfg, Normalization::fit(train.noisy.view())?)?;
    let job = noisy_job(cfg, &model, &teachers, train, val)?;
    run(cfg, model, 0, job, out_dir.as_ref())
}

/// Continues training from a checkpoint for `cfg.max_epochs` more epochs,
/// keeping its normalization. Optimizer moments restart from zero.
/// `teachers` must be given for noisy-speech checkpoints.
pub fn resume(
    cfg: &TrainConfig,
    checkpoint: impl AsRef<Path>,
    train: &FrameTriples,
    val: &FrameTriples,
    teachers: Option<(&Path, &Path)>,
    out_dir: impl AsRef<Path>,
) -> Result<TrainReport> {
    let (model, meta) = load_kind(checkpoint.as_ref(), cfg.stage.kind())?;
    let init = (model, meta.epochs_trained);
    match cfg.stage {
        Stage::Cvae | Stage::Nvae => train_teacher(cfg, cfg.stage, train, val, out_dir.as_ref(), Some(init)),
        Stage::Nsvae => {
            cfg.validate()?;
            let (c, n) = teachers.ok_or_else(|| Error::Config("resuming needs the teacher checkpoints".into()))?;
            let teachers = load_teachers(c, n)?;
            if (cfg.alpha > 0.0) != init.0.decoder.is_some() {
                return Err(Error::Config("alpha does not match the checkpoint's decoder".into()));
            }
            let job = noisy_job(cfg, &init.0, &teachers, train, val)?;
            run(cfg, init.0, init.1, job, out_dir.as_ref())
        }
    }
}

/// Validation loss of a teacher checkpoint on raw frames, using the same
/// fixed noise stream as training.
pub fn teacher_validation_loss(cfg: &TrainConfig, model: &VaeModel, frames: &FrameTriples) -> Result<LossBreakdown> {
    let job = Job::Teacher {
        train: Array2::zeros((0, model.num_bins())),
        val: model.normalization.apply(teacher_frames(frames, model.kind).view()),
        beta: cfg.beta,
    };
    job.validate(model, cfg.seed)
}

/// Validation loss of a noisy-speech checkpoint.
pub fn nsvae_validation_loss(cfg: &TrainConfig, model: &VaeModel, teachers: &(VaeModel, VaeModel), frames: &FrameTriples) -> Result<LossBreakdown> {
    let job = noisy_job(cfg, model, teachers, &FrameTriples { noisy: Array2::zeros((0, frames.num_bins())), speech: Array2::zeros((0, frames.num_bins())), noise: Array2::zeros((0, frames.num_bins())), utterances: Vec::new() }, frames)?;
    job.validate(model, cfg.seed)
}

/// Largest per-tensor relative error `|a - n| / max(|a|, |n|)` (norms over
/// the tensor) between `analytic` and central differences of `loss`.
pub fn gradient_check(model: &VaeModel, analytic: &VaeModel, loss: impl Fn(&VaeModel) -> f64, h: f64) -> f64 {
    let grads: Vec<Vec<f64>> = analytic.tensors().into_iter().map(|(_, _, v)| v.to_vec()).collect();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (t, g) in grads.iter().enumerate() {
        let mut num = vec![0.0; g.len()];
        for (i, slot) in num.iter_mut().enumerate() {
            let orig = probe.tensors_mut()[t][i];
            probe.tensors_mut()[t][i] = orig + h;
            let up = loss(&probe);
            probe.tensors_mut()[t][i] = orig - h;
            let down = loss(&probe);
            probe.tensors_mut()[t][i] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        let diff: f64 = g.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        if denom > 0.0 {
            worst = worst.max(diff / denom);
        }
    }
    worst
}
