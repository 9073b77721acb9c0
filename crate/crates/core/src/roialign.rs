//! RoIAlign: average of bilinear samples over a regular grid inside each
//! output bin.

use alloc::vec;

use thiserror::Error;

use crate::geometry::{BBox, GeometryError};
use crate::tensor::{FeatureMap, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RoiAlignError {
    #[error("degenerate roi with zero width or height")]
    DegenerateRoi,
    #[error("invalid roi: {0}")]
    InvalidRoi(#[from] GeometryError),
    #[error("output size and sampling ratio must be at least 1")]
    InvalidConfig,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct RoiAlignConfig {
    /// Bins per side of the pooled grid.
    pub output_size: usize,
    /// Sample points per bin side.
    pub sampling_ratio: usize,
    /// Shift by half a cell so that pixel `u` maps to `u / stride - 0.5`.
    pub aligned: bool,
}

impl Default for RoiAlignConfig {
    fn default() -> Self {
        RoiAlignConfig {
            output_size: 7,
            sampling_ratio: 2,
            aligned: true,
        }
    }
}

/// Pool `roi` (image pixel coordinates) from `features` into a
/// `C x P x P` map. The result keeps the input stride.
pub fn roi_align(features: &FeatureMap, roi: &BBox, cfg: &RoiAlignConfig) -> Result<FeatureMap, RoiAlignError> {
    if cfg.output_size == 0 || cfg.sampling_ratio == 0 {
        return Err(RoiAlignError::InvalidConfig);
    }
    roi.validate()?;
    if roi.width() <= 0.0 || roi.height() <= 0.0 {
        return Err(RoiAlignError::DegenerateRoi);
    }
    let scale = 1.0 / features.stride();
    let offset = if cfg.aligned { 0.5 } else { 0.0 };
    let x0 = roi.x1 * scale - offset;
    let y0 = roi.y1 * scale - offset;
    let mut roi_w = roi.width() * scale;
    let mut roi_h = roi.height() * scale;
    if !cfg.aligned {
        // Legacy behaviour: never pool from less than one cell.
        roi_w = roi_w.max(1.0);
        roi_h = roi_h.max(1.0);
    }
    let p = cfg.output_size;
    let s = cfg.sampling_ratio;
    let bin_w = roi_w / p as f64;
    let bin_h = roi_h / p as f64;
    let weight = 1.0 / (s * s) as f64;
    let channels = features.channels();

    let mut out = vec![0.0f32; channels * p * p];
    let mut acc = vec![0.0f64; channels];
    for ph in 0..p {
        for pw in 0..p {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for iy in 0..s {
                let y = y0 + ph as f64 * bin_h + (iy as f64 + 0.5) * bin_h / s as f64;
                for ix in 0..s {
                    let x = x0 + pw as f64 * bin_w + (ix as f64 + 0.5) * bin_w / s as f64;
                    features.accumulate_sample(x, y, weight, &mut acc);
                }
            }
            for (c, a) in acc.iter().enumerate() {
                out[(c * p + ph) * p + pw] = *a as f32;
            }
        }
    }
    Ok(FeatureMap::new(channels, p, p, out, features.stride())?)
}
