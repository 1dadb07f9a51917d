//! Intensity normalization for image volumes.

use crate::data::volume::{Volume, VolumeKind};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum Normalize {
    /// Zero mean, unit std over foreground (non-zero) voxels.
    Zscore,
    /// Rescale to [0, 1].
    Minmax,
    /// Clip to [lo, hi], then rescale to [0, 1].
    Window { lo: f64, hi: f64 },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NormalizeWarnings {
    /// Set when the input was constant and a degenerate denominator was
    /// replaced by zeros.
    pub constant_input: bool,
}

pub fn normalize_intensity(v: &Volume, mode: Normalize) -> Result<(Volume, NormalizeWarnings)> {
    if v.kind != VolumeKind::Image {
        return Err(Error::config("kind", "normalize_intensity expects an image"));
    }
    let mut out = v.clone();
    let mut warn = NormalizeWarnings::default();
    match mode {
        Normalize::Zscore => {
            // foreground = voxels that are exactly non-zero; falls back to
            // the full volume when everything is zero
            let fg: Vec<f64> = v
                .data
                .iter()
                .filter(|&&x| x != 0.0)
                .map(|&x| x as f64)
                .collect();
            if fg.is_empty() {
                warn.constant_input = true;
                out.data.iter_mut().for_each(|x| *x = 0.0);
                return Ok((out, warn));
            }
            let n = fg.len() as f64;
            let mean = fg.iter().sum::<f64>() / n;
            let var = fg.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            if var == 0.0 {
                warn.constant_input = true;
                out.data.iter_mut().for_each(|x| *x = 0.0);
                return Ok((out, warn));
            }
            let inv = 1.0 / var.sqrt();
            for x in &mut out.data {
                *x = ((*x as f64 - mean) * inv) as f32;
            }
        }
        Normalize::Minmax => {
            let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
            for &x in &v.data {
                lo = lo.min(x);
                hi = hi.max(x);
            }
            if hi <= lo {
                warn.constant_input = true;
                out.data.iter_mut().for_each(|x| *x = 0.0);
                return Ok((out, warn));
            }
            let inv = 1.0 / (hi - lo);
            for x in &mut out.data {
                *x = (*x - lo) * inv;
            }
        }
        Normalize::Window { lo, hi } => {
            if !(hi > lo) {
                return Err(Error::config("window", "requires hi > lo"));
            }
            let (lo, hi) = (lo as f32, hi as f32);
            let inv = 1.0 / (hi - lo);
            for x in &mut out.data {
                *x = (x.clamp(lo, hi) - lo) * inv;
            }
        }
    }
    Ok((out, warn))
}
