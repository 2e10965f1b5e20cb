//! Scoring of precomputed estimates listed in a pairs manifest.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::wav::read_wav;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalRecord, PesqTool};

/// One line of a pairs manifest. Relative paths resolve against the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub utterance_id: String,
    pub reference: PathBuf,
    pub estimate: PathBuf,
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<EvalPair>> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut p: EvalPair =
            serde_json::from_str(&line).map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), n + 1)))?;
        p.reference = base.join(&p.reference);
        p.estimate = base.join(&p.estimate);
        out.push(p);
    }
    Ok(out)
}

pub fn evaluate_pairs(pairs: &[EvalPair], pesq: Option<&PesqTool>) -> Result<Vec<EvalRecord>> {
    pairs
        .iter()
        .map(|p| evaluate(&p.utterance_id, &read_wav(&p.reference)?, &read_wav(&p.estimate)?, pesq))
        .collect()
}
