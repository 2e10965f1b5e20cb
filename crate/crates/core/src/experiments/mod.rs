//! Reproduction harness: synthetic corpus, mixture manifests, the γ sweep,
//! KL diagnostics and report files.

pub mod config;
pub mod corpus;
pub mod evaluate;
pub mod report;
pub mod sweep;

pub use config::ExperimentConfig;
pub use corpus::{build_dataset, synthesize_corpus, CorpusConfig, CorpusLayout, DatasetConfig, DatasetManifests};
pub use evaluate::{evaluate_pairs, load_pairs, EvalPair};
pub use report::{emit_report, ReportFiles};
pub use sweep::{
    kl_diagnostic, kl_diagnostic_from_paths, run_gamma_sweep, run_gamma_sweep_with, GammaRun, KlDiagRecord,
    SweepInputs, SweepReport, SweepSpec,
};
