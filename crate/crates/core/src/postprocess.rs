//! Score fusion, per-class greedy NMS and detection assembly.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::cmp::Ordering;

use thiserror::Error;

use crate::geometry::{iou, BBox};
use crate::math;
use crate::{ClassId, ImageId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PostprocessError {
    #[error("objectness score {0} outside [0, 1]")]
    ObjectnessRange(f64),
    #[error("class score {value} at index {index} outside [0, 1]")]
    ClassScoreRange { index: usize, value: f64 },
    #[error("NMS thresholds must lie in [0, 1]")]
    InvalidThreshold,
}

/// One scored box of one class in one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub image_id: ImageId,
    pub class_id: ClassId,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct NmsConfig {
    pub iou_threshold: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig {
            iou_threshold: 0.5,
            score_threshold: 0.0,
            max_detections: 100,
        }
    }
}

impl NmsConfig {
    pub fn validate(&self) -> Result<(), PostprocessError> {
        if (0.0..=1.0).contains(&self.iou_threshold) && (0.0..=1.0).contains(&self.score_threshold) {
            Ok(())
        } else {
            Err(PostprocessError::InvalidThreshold)
        }
    }
}

/// Geometric mean of the objectness score and each class score,
/// `sqrt(s1 * s2_c)`. With fusion disabled the class scores pass through.
pub fn fuse_scores(objectness: f64, class_scores: &[f64], enabled: bool) -> Result<alloc::vec::Vec<f64>, PostprocessError> {
    if !(0.0..=1.0).contains(&objectness) {
        return Err(PostprocessError::ObjectnessRange(objectness));
    }
    if let Some((index, &value)) = class_scores
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(PostprocessError::ClassScoreRange { index, value });
    }
    if !enabled {
        return Ok(class_scores.to_vec());
    }
    Ok(class_scores
        .iter()
        .map(|&s| math::sqrt(objectness * s))
        .collect())
}

/// Ranking used by NMS and for final truncation: score descending, then
/// box corners ascending.
pub fn score_order(a: &Detection, b: &Detection) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.bbox.lex_cmp(&b.bbox))
}

/// Greedy NMS run independently per class. The output is sorted by
/// [`score_order`] (class id breaks remaining ties) and truncated to
/// `max_detections`.
pub fn per_class_nms(dets: &[Detection], cfg: &NmsConfig) -> Vec<Detection> {
    let mut by_class: BTreeMap<ClassId, Vec<Detection>> = BTreeMap::new();
    for d in dets.iter().filter(|d| d.score >= cfg.score_threshold) {
        by_class.entry(d.class_id).or_default().push(*d);
    }
    let mut kept: Vec<Detection> = Vec::new();
    for (_, mut group) in by_class {
        // Stable sort keeps input order among exact duplicates.
        group.sort_by(score_order);
        let start = kept.len();
        for d in group {
            if kept[start..].iter().all(|k| iou(&k.bbox, &d.bbox) <= cfg.iou_threshold) {
                kept.push(d);
            }
        }
    }
    kept.sort_by(|a, b| score_order(a, b).then(a.class_id.cmp(&b.class_id)));
    kept.truncate(cfg.max_detections);
    kept
}
