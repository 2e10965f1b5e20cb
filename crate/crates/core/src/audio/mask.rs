use ndarray::ArrayView2;

use super::Spectrogram;
use crate::error::{Error, Result};

/// Scales each noisy bin by a real gain in `[0, 1]`, keeping the noisy phase.
pub fn apply_mask(noisy: &Spectrogram, mask: ArrayView2<'_, f64>) -> Result<Spectrogram> {
    if mask.dim() != noisy.bins.dim() {
        return Err(Error::Shape(format!(
            "mask is {:?} but spectrogram is {:?}",
            mask.dim(),
            noisy.bins.dim()
        )));
    }
    if let Some(v) = mask.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("mask value {v} outside [0, 1]")));
    }
    let mut out = noisy.clone();
    out.bins.zip_mut_with(&mask, |b, &m| *b *= m);
    Ok(out)
}
