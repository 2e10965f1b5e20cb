//! One TOML file configuring every harness step, and the directory layout
//! derived from it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::enhancement::EnhancementConfig;
use crate::error::{Error, Result};
use crate::training::{Gamma, Stage, TrainConfig};

use super::corpus::{CorpusConfig, DatasetConfig};
use super::sweep::SweepSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Root of all generated files.
    pub work_dir: PathBuf,
    /// Shared by corpus synthesis, mixing and every training run.
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub dataset: DatasetConfig,
    /// Base training settings; stage, weights and seed are set per step.
    pub train: TrainConfig,
    pub enhancement: EnhancementConfig,
    pub gammas: Vec<Gamma>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            work_dir: PathBuf::from("runs"),
            seed: 0,
            corpus: CorpusConfig::default(),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            enhancement: EnhancementConfig::default(),
            gammas: [1.0, 2.0, 5.0, 10.0, 100.0, 1000.0]
                .into_iter()
                .map(Gamma::Finite)
                .chain([Gamma::Infinite])
                .collect(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train_config(Stage::Cvae).validate()?;
        cfg.enhancement.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        TrainConfig {
            stage,
            alpha: 1.0,
            beta: 1.0,
            gamma_label: "1".into(),
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.work_dir.join("corpus")
    }

    pub fn manifest(&self, split: crate::dataset::Split) -> PathBuf {
        self.work_dir.join("manifests").join(format!("{}.jsonl", split.name()))
    }

    pub fn checkpoint_dir(&self, stage: Stage) -> PathBuf {
        self.work_dir.join(match stage {
            Stage::Cvae => "cvae",
            Stage::Nvae => "nvae",
            Stage::Nsvae => "nsvae",
        })
    }

    pub fn sweep_dir(&self) -> PathBuf {
        self.work_dir.join("sweep")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.work_dir.join("report")
    }

    /// Sweep over the configured gammas with the layout's manifests and
    /// teacher checkpoints.
    pub fn sweep_spec(&self) -> SweepSpec {
        use crate::dataset::Split;
        SweepSpec {
            gammas: self.gammas.clone(),
            seed: self.seed,
            train_manifest: self.manifest(Split::Train),
            validation_manifest: self.manifest(Split::Validation),
            test_manifest: self.manifest(Split::Test),
            cvae: self.checkpoint_dir(Stage::Cvae),
            nvae: self.checkpoint_dir(Stage::Nvae),
            out_dir: self.sweep_dir(),
            train: self.train_config(Stage::Nsvae),
            enhancement: self.enhancement,
        }
    }
}
