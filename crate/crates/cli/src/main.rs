//! `bpvae` command-line harness.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bpvae::audio::wav::{read_wav, write_wav, WavFormat};
use bpvae::dataset::{FrameTriples, Manifest, Split};
use bpvae::enhancement::Enhancer;
use bpvae::experiments::report::emit_report;
use bpvae::experiments::sweep::SWEEP_REPORT_FILE;
use bpvae::experiments::{
    build_dataset, evaluate_pairs, kl_diagnostic_from_paths, load_pairs, run_gamma_sweep, synthesize_corpus,
    ExperimentConfig, SweepReport,
};
use bpvae::metrics::{aggregate, write_records_csv, PesqTool};
use bpvae::training::{pretrain_clean_vae, pretrain_noise_vae, resume, train_nsvae, Gamma, Stage, TrainReport};

#[derive(Parser)]
#[command(name = "bpvae", version, about = "Disentangled VAE speech enhancement harness")]
struct Cli {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides `work_dir` from the config.
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the default config to stdout.
    InitConfig,
    /// Generate a synthetic speech and noise corpus.
    SynthCorpus {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build speaker-disjoint mixture manifests.
    Mix {
        #[arg(long)]
        speech: Option<PathBuf>,
        #[arg(long)]
        noise: Option<PathBuf>,
        /// Directory receiving train/validation/test .jsonl files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pre-train the clean-speech VAE.
    TrainCvae(TrainArgs),
    /// Pre-train the noise VAE.
    TrainNvae(TrainArgs),
    /// Train the noisy-speech VAE against the frozen teachers.
    TrainNsvae {
        /// Weight ratio beta:alpha, a positive number or `inf`.
        #[arg(long, default_value = "1")]
        gamma: Gamma,
        #[command(flatten)]
        common: TrainArgs,
        #[command(flatten)]
        teachers: Teachers,
    },
    /// Enhance one WAV file.
    Enhance {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        nsvae: PathBuf,
        #[command(flatten)]
        teachers: Teachers,
        /// Also write diagnostics as JSON.
        #[arg(long)]
        diagnostics: Option<PathBuf>,
    },
    /// Score estimates listed in a pairs manifest.
    Evaluate {
        /// JSONL lines of {utterance_id, reference, estimate}.
        #[arg(long)]
        pairs: PathBuf,
        /// Per-utterance CSV; the aggregate goes next to it as .json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean validation KL between noisy-speech and teacher posteriors.
    KlDiag {
        #[arg(long)]
        nsvae: PathBuf,
        #[command(flatten)]
        teachers: Teachers,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train and evaluate one noisy-speech VAE per gamma.
    SweepGamma {
        /// Comma-separated, e.g. `1,10,inf`; defaults to the config.
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<Gamma>>,
    },
    /// Render table, KL plot and per-SNR files from a sweep.
    Report {
        #[arg(long)]
        sweep: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct Teachers {
    #[arg(long)]
    cvae: Option<PathBuf>,
    #[arg(long)]
    nvae: Option<PathBuf>,
}

impl Teachers {
    fn resolve(&self, cfg: &ExperimentConfig) -> (PathBuf, PathBuf) {
        (
            self.cvae.clone().unwrap_or_else(|| cfg.checkpoint_dir(Stage::Cvae)),
            self.nvae.clone().unwrap_or_else(|| cfg.checkpoint_dir(Stage::Nvae)),
        )
    }
}

fn frames(path: &Path) -> Result<FrameTriples> {
    let m = Manifest::load(path).with_context(|| format!("loading manifest {}", path.display()))?;
    Ok(FrameTriples::from_manifest(&m)?)
}

fn print_report(r: &TrainReport) {
    let best = r.best();
    println!(
        "{:?} gamma {}: best epoch {} validation loss {:.4}, {} parameters, checkpoint {}",
        r.stage,
        r.gamma_label,
        r.best_epoch,
        best.validation.total,
        r.num_parameters,
        r.checkpoint_path.display()
    );
}

fn train(cfg: &ExperimentConfig, stage: Stage, gamma: Gamma, args: &TrainArgs, teachers: Option<&Teachers>) -> Result<()> {
    let tc = cfg.train_config(stage).with_gamma(if stage == Stage::Nsvae { gamma } else { Gamma::Finite(1.0) });
    let train = frames(&args.train.clone().unwrap_or_else(|| cfg.manifest(Split::Train)))?;
    let val = frames(&args.val.clone().unwrap_or_else(|| cfg.manifest(Split::Validation)))?;
    let out = args.out.clone().unwrap_or_else(|| match stage {
        Stage::Nsvae => cfg.sweep_spec().run_dir(gamma),
        s => cfg.checkpoint_dir(s),
    });
    let t = teachers.map(|t| t.resolve(cfg));
    let report = match (&args.resume, stage) {
        (Some(ckpt), _) => resume(&tc, ckpt, &train, &val, t.as_ref().map(|(c, n)| (c.as_path(), n.as_path())), &out)?,
        (None, Stage::Cvae) => pretrain_clean_vae(&tc, &train, &val, &out)?,
        (None, Stage::Nvae) => pretrain_noise_vae(&tc, &train, &val, &out)?,
        (None, Stage::Nsvae) => {
            let (c, n) = t.expect("teachers given for nsvae");
            train_nsvae(&tc, &train, &val, c, n, &out)?
        }
    };
    print_report(&report);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(w) = cli.work_dir {
        cfg.work_dir = w;
    }
    match cli.command {
        Command::InitConfig => print!("{}", cfg.to_toml_string()),
        Command::SynthCorpus { out } => {
            let out = out.unwrap_or_else(|| cfg.corpus_dir());
            let corpus = bpvae::experiments::CorpusConfig {
                seed: cfg.seed,
                ..cfg.corpus.clone()
            };
            let layout = synthesize_corpus(&corpus, &out)?;
            println!("speech: {}\nnoise: {}", layout.speech_dir.display(), layout.noise_dir.display());
        }
        Command::Mix { speech, noise, out } => {
            let speech = speech.unwrap_or_else(|| cfg.corpus_dir().join("speech"));
            let noise = noise.unwrap_or_else(|| cfg.corpus_dir().join("noise"));
            let out = out.unwrap_or_else(|| cfg.manifest(Split::Train).parent().expect("manifest dir").to_path_buf());
            let ds = bpvae::experiments::DatasetConfig {
                seed: cfg.seed,
                ..cfg.dataset.clone()
            };
            let manifests = build_dataset(&speech, &noise, &ds)?;
            for (split, path) in Split::ALL.iter().zip(manifests.write(&out)?) {
                println!("{}: {} mixtures -> {}", split.name(), manifests.split(*split).len(), path.display());
            }
        }
        Command::TrainCvae(a) => train(&cfg, Stage::Cvae, Gamma::Finite(1.0), &a, None)?,
        Command::TrainNvae(a) => train(&cfg, Stage::Nvae, Gamma::Finite(1.0), &a, None)?,
        Command::TrainNsvae { gamma, common, teachers } => train(&cfg, Stage::Nsvae, gamma, &common, Some(&teachers))?,
        Command::Enhance {
            input,
            out,
            nsvae,
            teachers,
            diagnostics,
        } => {
            let (c, n) = teachers.resolve(&cfg);
            let enhancer = Enhancer::load(Some(&nsvae), &c, &n)?;
            let noisy = read_wav(&input)?;
            let (wave, diag) = enhancer.enhance(&noisy, &cfg.enhancement)?;
            write_wav(&out, &wave, WavFormat::Float32)?;
            if let Some(d) = diagnostics {
                fs::write(&d, serde_json::to_string_pretty(&diag)?).with_context(|| format!("writing {}", d.display()))?;
            }
            if diag.untrained_checkpoint {
                eprintln!("warning: a checkpoint was never trained");
            }
        }
        Command::Evaluate { pairs, out } => {
            let pesq = PesqTool::from_env();
            let records = evaluate_pairs(&load_pairs(&pairs)?, pesq.as_ref())?;
            write_records_csv(&out, &records)?;
            let summary = aggregate(&records)?;
            let json = out.with_extension("json");
            fs::write(&json, serde_json::to_string_pretty(&summary)?).with_context(|| format!("writing {}", json.display()))?;
            println!(
                "SI-SDR {} dB, STOI {}, PESQ {}",
                summary.si_sdr_db.display(2, 1.0),
                summary.stoi.display(2, 100.0),
                summary.pesq.map(|p| p.display(2, 1.0)).unwrap_or_else(|| "n/a".into())
            );
        }
        Command::KlDiag { nsvae, teachers, manifest } => {
            let (c, n) = teachers.resolve(&cfg);
            let manifest = manifest.unwrap_or_else(|| cfg.manifest(Split::Validation));
            let rec = kl_diagnostic_from_paths(&nsvae, &c, &n, &manifest)?;
            println!("{}", serde_json::to_string(&rec)?);
        }
        Command::SweepGamma { gammas } => {
            let mut spec = cfg.sweep_spec();
            if let Some(g) = gammas {
                spec.gammas = g;
            }
            let report = run_gamma_sweep(&spec)?;
            let files = emit_report(&report, cfg.report_dir())?;
            let failed = report.runs.iter().filter(|r| r.outcome.is_err()).count();
            println!("table: {}", files.table.display());
            if failed > 0 {
                bail!("{failed} of {} runs failed; see {}", report.runs.len(), spec.out_dir.join(SWEEP_REPORT_FILE).display());
            }
        }
        Command::Report { sweep, out } => {
            let sweep = sweep.unwrap_or_else(|| cfg.sweep_dir().join(SWEEP_REPORT_FILE));
            let report = SweepReport::load(&sweep)?;
            let files = emit_report(&report, out.unwrap_or_else(|| cfg.report_dir()))?;
            print!("{}", fs::read_to_string(&files.table)?);
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
