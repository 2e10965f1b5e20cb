use ndarray::Array2;

use super::Spectrogram;
use crate::error::{Error, Result};

/// Power floor applied before the logarithm so digital silence stays finite.
pub const DEFAULT_POWER_FLOOR: f64 = 1e-10;

/// Natural-log power spectrum, `[frames x bins]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LpsFrames {
    pub values: Array2<f64>,
}

impl LpsFrames {
    pub fn num_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_bins(&self) -> usize {
        self.values.ncols()
    }

    /// Inverse map back to power, `exp(lps)`.
    pub fn to_power(&self) -> Array2<f64> {
        self.values.mapv(f64::exp)
    }
}

/// `ln(max(|X|^2, floor))` per bin.
pub fn lps(spec: &Spectrogram, floor: f64) -> Result<LpsFrames> {
    if !(floor > 0.0 && floor.is_finite()) {
        return Err(Error::invalid(format!("power floor must be positive, got {floor}")));
    }
    Ok(LpsFrames {
        values: spec.bins.mapv(|c| c.norm_sqr().max(floor).ln()),
    })
}
