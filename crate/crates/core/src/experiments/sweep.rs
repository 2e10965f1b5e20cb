//! The γ sweep: one noisy-speech VAE per weight ratio against shared
//! teachers and data, then test-set scores and validation KL diagnostics.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::checkpoint::{load_kind, ModelKind, VaeModel};
use crate::dataset::{FrameTriples, Manifest};
use crate::audio::Mixture;
use crate::enhancement::{EnhancementConfig, Enhancer};
use crate::error::{Error, Result};
use crate::gaussian::kl_unchecked;
use crate::losses::LossBreakdown;
use crate::metrics::{aggregate, evaluate, EvalRecord, MetricSummary, PesqTool};
use crate::training::{encode_chunked, load_teachers, teacher_posteriors, train_nsvae, Gamma, Stage, TrainConfig};

pub const SWEEP_REPORT_FILE: &str = "sweep.json";

fn default_gammas() -> Vec<Gamma> {
    [1.0, 2.0, 5.0, 10.0, 100.0, 1000.0]
        .into_iter()
        .map(Gamma::Finite)
        .chain([Gamma::Infinite])
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    #[serde(default = "default_gammas")]
    pub gammas: Vec<Gamma>,
    /// Shared by every run; overrides `train.seed`.
    pub seed: u64,
    pub train_manifest: PathBuf,
    pub validation_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub cvae: PathBuf,
    pub nvae: PathBuf,
    pub out_dir: PathBuf,
    /// Base noisy-speech training config; alpha and beta are set per γ.
    #[serde(default = "nsvae_default")]
    pub train: TrainConfig,
    #[serde(default)]
    pub enhancement: EnhancementConfig,
}

fn nsvae_default() -> TrainConfig {
    TrainConfig::for_stage(Stage::Nsvae)
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.gammas.contains(&Gamma::Finite(1.0)) {
            return Err(Error::Config("the sweep must include gamma = 1".into()));
        }
        if self.train.stage != Stage::Nsvae {
            return Err(Error::Config("sweep training config must be for stage nsvae".into()));
        }
        let mut labels: Vec<String> = self.gammas.iter().map(|g| g.label()).collect();
        labels.sort();
        labels.dedup();
        if labels.len() != self.gammas.len() {
            return Err(Error::Config("duplicate gamma values".into()));
        }
        self.enhancement.validate()
    }

    /// Training config of the run for `gamma`.
    pub fn run_config(&self, gamma: Gamma) -> TrainConfig {
        let mut cfg = self.train.clone().with_gamma(gamma);
        cfg.seed = self.seed;
        cfg
    }

    pub fn run_dir(&self, gamma: Gamma) -> PathBuf {
        self.out_dir.join(format!("gamma_{}", gamma.label()))
    }
}

/// Validation averages of `KL(p(z_x|y) || p(z_x|x))` and
/// `KL(p(z_d|y) || p(z_d|d))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlDiagRecord {
    pub gamma: Option<Gamma>,
    pub mean_kl_speech: f64,
    pub mean_kl_noise: f64,
    pub frames: usize,
}

pub fn kl_diagnostic(nsvae: &VaeModel, cvae: &VaeModel, nvae: &VaeModel, frames: &FrameTriples) -> Result<KlDiagRecord> {
    if nsvae.kind != ModelKind::NoisyVae || cvae.kind != ModelKind::CleanVae || nvae.kind != ModelKind::NoiseVae {
        return Err(Error::Config("kl_diagnostic needs noisy-speech, clean and noise models".into()));
    }
    if frames.is_empty() || frames.speech.dim() != frames.noisy.dim() || frames.noise.dim() != frames.noisy.dim() {
        return Err(Error::Dataset("KL diagnostic needs aligned noisy, speech and noise frames".into()));
    }
    let mut heads = encode_chunked(&nsvae.encoder, nsvae.normalization.apply(frames.noisy.view()).view())?;
    let noisy_noise = heads.pop().expect("two latents");
    let noisy_speech = heads.pop().expect("two latents");
    let clean_speech = teacher_posteriors(cvae, frames.speech.view())?;
    let clean_noise = teacher_posteriors(nvae, frames.noise.view())?;
    if clean_speech.dim() != noisy_speech.dim() {
        return Err(Error::DimensionMismatch {
            context: "latent size of teachers and noisy-speech VAE",
            expected: clean_speech.dim(),
            got: noisy_speech.dim(),
        });
    }
    let n = frames.len();
    let mean = |a: &crate::networks::GaussianBatch, b: &crate::networks::GaussianBatch| {
        (0..n).map(|i| kl_unchecked(&a.get(i), &b.get(i))).sum::<f64>() / n as f64
    };
    Ok(KlDiagRecord {
        gamma: None,
        mean_kl_speech: mean(&noisy_speech, &clean_speech),
        mean_kl_noise: mean(&noisy_noise, &clean_noise),
        frames: n,
    })
}

/// Loads the checkpoints and the validation manifest, then runs
/// [`kl_diagnostic`].
pub fn kl_diagnostic_from_paths(nsvae: &Path, cvae: &Path, nvae: &Path, manifest: &Path) -> Result<KlDiagRecord> {
    let (ns, _) = load_kind(nsvae, ModelKind::NoisyVae)?;
    let (c, n) = load_teachers(cvae, nvae)?;
    let frames = FrameTriples::from_manifest(&Manifest::load(manifest)?)?;
    kl_diagnostic(&ns, &c, &n, &frames)
}

/// Scores of one method on the test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub label: String,
    pub records: Vec<EvalRecord>,
    pub summary: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletedRun {
    pub checkpoint: PathBuf,
    pub num_parameters: usize,
    pub has_decoder: bool,
    pub first_epoch_train: Option<LossBreakdown>,
    pub best_epoch: usize,
    pub kl: KlDiagRecord,
    pub result: MethodResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaRun {
    pub gamma: Gamma,
    pub outcome: std::result::Result<CompletedRun, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub noisy: MethodResult,
    pub oracle: MethodResult,
    pub runs: Vec<GammaRun>,
    pub pesq_configured: bool,
    /// Mixing SNR of each test utterance.
    pub snr_by_id: BTreeMap<String, f64>,
}

impl SweepReport {
    pub fn run(&self, gamma: Gamma) -> Option<&CompletedRun> {
        self.runs
            .iter()
            .find(|r| r.gamma == gamma)
            .and_then(|r| r.outcome.as_ref().ok())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub struct TestItem {
    pub id: String,
    pub snr_db: f64,
    pub mixture: Mixture,
}

/// Data shared by every run of a sweep.
pub struct SweepInputs {
    pub train: FrameTriples,
    pub validation: FrameTriples,
    pub test: Vec<TestItem>,
}

impl SweepInputs {
    pub fn load(spec: &SweepSpec) -> Result<Self> {
        let train = FrameTriples::from_manifest(&Manifest::load(&spec.train_manifest)?)?;
        let validation = FrameTriples::from_manifest(&Manifest::load(&spec.validation_manifest)?)?;
        let test_manifest = Manifest::load(&spec.test_manifest)?;
        let test = test_manifest
            .entries
            .iter()
            .map(|e| {
                Ok(TestItem {
                    id: e.id.clone(),
                    snr_db: e.snr_db,
                    mixture: test_manifest.render(e)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { train, validation, test })
    }
}

/// Scores `produce(item)` against each item's clean speech.
pub fn evaluate_method(
    label: &str,
    items: &[TestItem],
    pesq: Option<&PesqTool>,
    produce: impl Fn(&TestItem) -> Result<Waveform>,
) -> Result<MethodResult> {
    let records = items
        .iter()
        .map(|it| {
            let est = produce(it)?;
            evaluate(&it.id, &it.mixture.speech, &est, pesq)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MethodResult {
        label: label.to_string(),
        summary: aggregate(&records)?,
        records,
    })
}

/// Display label of a γ row.
pub fn gamma_row_label(gamma: Gamma) -> String {
    match gamma {
        Gamma::Finite(g) if g == 1.0 => "PVAE (γ=1)".into(),
        Gamma::Finite(g) => format!("γ={g}"),
        Gamma::Infinite => "γ=+∞".into(),
    }
}

fn run_one(spec: &SweepSpec, gamma: Gamma, inputs: &SweepInputs, teachers: &(VaeModel, VaeModel), pesq: Option<&PesqTool>) -> Result<CompletedRun> {
    let cfg = spec.run_config(gamma);
    let dir = spec.run_dir(gamma);
    let report = train_nsvae(&cfg, &inputs.train, &inputs.validation, &spec.cvae, &spec.nvae, &dir)?;
    let (model, _) = load_kind(&report.checkpoint_path, ModelKind::NoisyVae)?;
    let mut kl = kl_diagnostic(&model, &teachers.0, &teachers.1, &inputs.validation)?;
    kl.gamma = Some(gamma);
    let has_decoder = model.decoder.is_some();
    let num_parameters = model.num_parameters();
    let enhancer = Enhancer::new(Some(model), teachers.0.clone(), teachers.1.clone())?;
    let result = evaluate_method(&gamma_row_label(gamma), &inputs.test, pesq, |it| {
        Ok(enhancer.enhance(&it.mixture.noisy, &spec.enhancement)?.0)
    })?;
    Ok(CompletedRun {
        checkpoint: report.checkpoint_path.clone(),
        num_parameters,
        has_decoder,
        first_epoch_train: report.epochs.get(1).and_then(|e| e.train),
        best_epoch: report.best_epoch,
        kl,
        result,
    })
}

/// Runs every γ of the sweep. A failing run is recorded and the sweep
/// moves on; missing teachers or data abort the sweep.
pub fn run_gamma_sweep(spec: &SweepSpec) -> Result<SweepReport> {
    spec.validate()?;
    let teachers = load_teachers(&spec.cvae, &spec.nvae)?;
    let inputs = SweepInputs::load(spec)?;
    run_gamma_sweep_with(spec, &inputs, &teachers)
}

pub fn run_gamma_sweep_with(spec: &SweepSpec, inputs: &SweepInputs, teachers: &(VaeModel, VaeModel)) -> Result<SweepReport> {
    spec.validate()?;
    fs::create_dir_all(&spec.out_dir).map_err(|e| Error::io(&spec.out_dir, e))?;
    let pesq = PesqTool::from_env();
    if pesq.is_none() {
        log::info!("PESQ not configured; set {} to enable it", crate::metrics::PESQ_ENV);
    }
    let noisy = evaluate_method("Noisy", &inputs.test, pesq.as_ref(), |it| Ok(it.mixture.noisy.clone()))?;
    let oracle_enhancer = Enhancer::new(None, teachers.0.clone(), teachers.1.clone())?;
    let oracle = evaluate_method("Oracle", &inputs.test, pesq.as_ref(), |it| {
        Ok(oracle_enhancer
            .enhance_oracle(&it.mixture.speech, &it.mixture.noise, &spec.enhancement)?
            .0)
    })?;
    let mut runs = Vec::new();
    for &gamma in &spec.gammas {
        log::info!("sweep: training gamma = {gamma}");
        let outcome = run_one(spec, gamma, inputs, teachers, pesq.as_ref()).map_err(|e| {
            log::error!("sweep: gamma = {gamma} failed: {e}");
            e.to_string()
        });
        runs.push(GammaRun { gamma, outcome });
    }
    let report = SweepReport {
        noisy,
        oracle,
        runs,
        pesq_configured: pesq.is_some(),
        snr_by_id: inputs.test.iter().map(|t| (t.id.clone(), t.snr_db)).collect(),
    };
    report.save(spec.out_dir.join(SWEEP_REPORT_FILE))?;
    Ok(report)
}
