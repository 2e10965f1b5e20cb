//! Deterministic report files from a [`SweepReport`].

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::MetricSummary;
use crate::training::Gamma;

use super::sweep::{gamma_row_label, KlDiagRecord, MethodResult, SweepReport};

pub const TABLE_FILE: &str = "table1.csv";
pub const KL_CSV_FILE: &str = "kl.csv";
pub const KL_PLOT_FILE: &str = "kl.svg";
pub const PER_SNR_FILE: &str = "per_snr.csv";

/// SNR bin edges of the per-SNR breakdown, dB.
const SNR_EDGES: [f64; 6] = [-10.0, -5.0, 0.0, 5.0, 10.0, 15.0];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub table: PathBuf,
    pub kl_csv: PathBuf,
    pub kl_plot: PathBuf,
    pub per_snr: PathBuf,
}

fn cells(s: &MetricSummary) -> [String; 3] {
    [
        s.stoi.display(2, 100.0),
        s.pesq.map(|p| p.display(2, 1.0)).unwrap_or_else(|| "n/a".into()),
        s.si_sdr_db.display(2, 1.0),
    ]
}

/// Table rows in order: Noisy, Oracle, then the γ runs by increasing γ.
pub fn table_csv(report: &SweepReport) -> String {
    let mut out = String::from("Method,STOI,PESQ,SI-SDR\n");
    let mut row = |label: &str, c: [String; 3]| {
        let _ = writeln!(out, "{},{},{},{}", label, c[0], c[1], c[2]);
    };
    row("Noisy", cells(&report.noisy.summary));
    row("Oracle", cells(&report.oracle.summary));
    for run in sorted_runs(report) {
        match &run.outcome {
            Ok(done) => row(&gamma_row_label(run.gamma), cells(&done.result.summary)),
            Err(_) => row(&gamma_row_label(run.gamma), ["failed".into(), "failed".into(), "failed".into()]),
        }
    }
    out
}

fn sorted_runs(report: &SweepReport) -> Vec<&super::sweep::GammaRun> {
    let mut runs: Vec<_> = report.runs.iter().collect();
    runs.sort_by(|a, b| a.gamma.value().total_cmp(&b.gamma.value()));
    runs
}

fn kl_records(report: &SweepReport) -> Vec<KlDiagRecord> {
    sorted_runs(report)
        .into_iter()
        .filter_map(|r| r.outcome.as_ref().ok().map(|d| d.kl))
        .collect()
}

pub fn kl_csv(report: &SweepReport) -> String {
    let mut out = String::from("gamma,mean_kl_speech,mean_kl_noise\n");
    for r in kl_records(report) {
        let g = r.gamma.map(|g| g.label()).unwrap_or_default();
        let _ = writeln!(out, "{g},{:.6},{:.6}", r.mean_kl_speech, r.mean_kl_noise);
    }
    out
}

/// Horizontal positions: log10 γ for finite values, one decade past the
/// largest for ∞.
fn x_positions(gammas: &[Gamma]) -> Vec<f64> {
    let max_log = gammas
        .iter()
        .filter_map(|g| match g {
            Gamma::Finite(v) => Some(v.log10()),
            Gamma::Infinite => None,
        })
        .fold(0.0f64, f64::max);
    gammas
        .iter()
        .map(|g| match g {
            Gamma::Finite(v) => v.log10(),
            Gamma::Infinite => max_log + 1.0,
        })
        .collect()
}

/// Line plot of mean KL against γ, speech and noise latents.
pub fn kl_svg(records: &[KlDiagRecord]) -> String {
    let (w, h) = (480.0, 320.0);
    let (left, right, top, bottom) = (60.0, 20.0, 20.0, 50.0);
    let gammas: Vec<Gamma> = records.iter().filter_map(|r| r.gamma).collect();
    let xs = x_positions(&gammas);
    let (x0, x1) = (
        xs.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0),
        xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(1.0),
    );
    let ymax = records
        .iter()
        .flat_map(|r| [r.mean_kl_speech, r.mean_kl_noise])
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * 1.1;
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - y / ymax * (h - top - bottom);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{:.2},{:.2}V{:.2}H{:.2}" fill="none" stroke="black"/>"#,
        left,
        top,
        h - bottom,
        w - right
    );
    for (g, x) in gammas.iter().zip(&xs) {
        let label = match g {
            Gamma::Infinite => "∞".to_string(),
            Gamma::Finite(v) => format!("{v}"),
        };
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{label}</text>"#,
            px(*x),
            h - bottom + 16.0
        );
    }
    for k in 0..=4 {
        let y = ymax * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{y:.2}</text>"#, left - 6.0, py(y) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">γ (log scale)</text>"#, (left + w - right) / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text transform="translate(14,{:.2}) rotate(-90)" text-anchor="middle">mean KL (nats)</text>"#, (top + h - bottom) / 2.0);
    for (name, color, get) in [
        ("speech", "#1f77b4", (|r: &KlDiagRecord| r.mean_kl_speech) as fn(&KlDiagRecord) -> f64),
        ("noise", "#d62728", |r: &KlDiagRecord| r.mean_kl_noise),
    ] {
        let pts: Vec<String> = records
            .iter()
            .zip(&xs)
            .map(|(r, x)| format!("{:.2},{:.2}", px(*x), py(get(r))))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
        for p in &pts {
            let (cx, cy) = p.split_once(',').expect("x,y");
            let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
        }
        let ly = if name == "speech" { top + 10.0 } else { top + 26.0 };
        let _ = writeln!(s, r#"<text x="{:.2}" y="{ly:.2}" fill="{color}">{name}</text>"#, w - right - 60.0);
    }
    s.push_str("</svg>\n");
    s
}

fn snr_bin(snr: f64) -> Option<usize> {
    (0..SNR_EDGES.len() - 1).find(|&i| snr >= SNR_EDGES[i] && (snr < SNR_EDGES[i + 1] || (i == SNR_EDGES.len() - 2 && snr <= SNR_EDGES[i + 1])))
}

/// Mean scores per 5 dB SNR bin for every method. Supplementary only.
pub fn per_snr_csv(report: &SweepReport) -> String {
    let mut methods: Vec<&MethodResult> = vec![&report.noisy, &report.oracle];
    for run in sorted_runs(report) {
        if let Ok(done) = &run.outcome {
            methods.push(&done.result);
        }
    }
    let mut out = String::from("method,snr_bin,n,stoi,si_sdr_db\n");
    for m in methods {
        for b in 0..SNR_EDGES.len() - 1 {
            let recs: Vec<_> = m
                .records
                .iter()
                .filter(|r| report.snr_by_id.get(&r.utterance_id).and_then(|s| snr_bin(*s)) == Some(b))
                .collect();
            if recs.is_empty() {
                continue;
            }
            let n = recs.len() as f64;
            let _ = writeln!(
                out,
                "{},[{},{}),{},{:.2},{:.2}",
                m.label,
                SNR_EDGES[b],
                SNR_EDGES[b + 1],
                recs.len(),
                recs.iter().map(|r| r.stoi).sum::<f64>() / n * 100.0,
                recs.iter().map(|r| r.si_sdr_db).sum::<f64>() / n
            );
        }
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the table, KL CSV and plot, and per-SNR breakdown into `dir`.
pub fn emit_report(report: &SweepReport, dir: impl AsRef<Path>) -> Result<ReportFiles> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ReportFiles {
        table: dir.join(TABLE_FILE),
        kl_csv: dir.join(KL_CSV_FILE),
        kl_plot: dir.join(KL_PLOT_FILE),
        per_snr: dir.join(PER_SNR_FILE),
    };
    write(&files.table, &table_csv(report))?;
    write(&files.kl_csv, &kl_csv(report))?;
    write(&files.kl_plot, &kl_svg(&kl_records(report)))?;
    write(&files.per_snr, &per_snr_csv(report))?;
    if !report.pesq_configured {
        log::info!("PESQ column marked n/a: no external tool configured");
    }
    Ok(files)
}
