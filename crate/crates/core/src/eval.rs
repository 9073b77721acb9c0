//! AP50 evaluation over base/novel category splits.
//!
//! Matching follows the COCO convention: within one (image, class) pair,
//! detections are visited by descending score and each takes the unmatched
//! ground truth of highest IoU, provided that IoU is at least the threshold.
//! Precision is made monotone from the right and sampled at the 101 recall
//! levels 0, 0.01, ..., 1.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use thiserror::Error;

use crate::geometry::{iou, BBox, ImageExtent};
use crate::postprocess::Detection;
use crate::{ClassId, ImageId};

/// IoU threshold of AP50.
pub const AP50_IOU: f64 = 0.5;

/// Annotations may overhang their image by this much before being rejected.
const EXTENT_SLACK: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("schema: {0}")]
    Schema(String),
    #[error("split: {0}")]
    Split(String),
    #[error("detection refers to class {0}, which is not part of the split")]
    UnknownClass(ClassId),
    #[error("detection refers to unknown image {0}")]
    UnknownImage(ImageId),
}

fn schema(msg: impl Into<String>) -> EvalError {
    EvalError::Schema(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub image_id: ImageId,
    pub class_id: ClassId,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthSet {
    images: BTreeMap<ImageId, ImageExtent>,
    annotations: Vec<Annotation>,
    categories: BTreeMap<ClassId, String>,
}

impl GroundTruthSet {
    pub fn new(
        images: impl IntoIterator<Item = (ImageId, ImageExtent)>,
        annotations: Vec<Annotation>,
        categories: impl IntoIterator<Item = (ClassId, String)>,
    ) -> Result<Self, EvalError> {
        let mut image_map = BTreeMap::new();
        for (id, extent) in images {
            if image_map.insert(id, extent).is_some() {
                return Err(schema(alloc::format!("duplicate image id {id}")));
            }
        }
        let mut cat_map = BTreeMap::new();
        for (id, name) in categories {
            if cat_map.insert(id, name).is_some() {
                return Err(schema(alloc::format!("duplicate category id {id}")));
            }
        }
        for a in &annotations {
            let extent = image_map
                .get(&a.image_id)
                .ok_or_else(|| schema(alloc::format!("annotation refers to unknown image {}", a.image_id)))?;
            if !cat_map.contains_key(&a.class_id) {
                return Err(schema(alloc::format!("annotation refers to unknown category {}", a.class_id)));
            }
            a.bbox
                .validate()
                .map_err(|e| schema(alloc::format!("annotation box on image {}: {e}", a.image_id)))?;
            let b = &a.bbox;
            if b.x1 < -EXTENT_SLACK
                || b.y1 < -EXTENT_SLACK
                || b.x2 > f64::from(extent.width) + EXTENT_SLACK
                || b.y2 > f64::from(extent.height) + EXTENT_SLACK
            {
                return Err(schema(alloc::format!("annotation box outside image {}", a.image_id)));
            }
        }
        Ok(GroundTruthSet {
            images: image_map,
            annotations,
            categories: cat_map,
        })
    }

    pub fn images(&self) -> &BTreeMap<ImageId, ImageExtent> {
        &self.images
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn categories(&self) -> &BTreeMap<ClassId, String> {
        &self.categories
    }
}

/// LVIS-style frequency groups.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrequencyGroups {
    pub rare: BTreeSet<ClassId>,
    pub common: BTreeSet<ClassId>,
    pub frequent: BTreeSet<ClassId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategorySplit {
    base: BTreeSet<ClassId>,
    novel: BTreeSet<ClassId>,
    groups: Option<FrequencyGroups>,
}

impl CategorySplit {
    /// Validate a split against the category table of `gt`.
    pub fn new(
        base: impl IntoIterator<Item = ClassId>,
        novel: impl IntoIterator<Item = ClassId>,
        groups: Option<FrequencyGroups>,
        categories: &BTreeMap<ClassId, String>,
    ) -> Result<Self, EvalError> {
        let base: BTreeSet<ClassId> = base.into_iter().collect();
        let novel: BTreeSet<ClassId> = novel.into_iter().collect();
        if let Some(id) = base.intersection(&novel).next() {
            return Err(EvalError::Split(alloc::format!("category {id} is both base and novel")));
        }
        if let Some(id) = base.iter().chain(&novel).find(|id| !categories.contains_key(id)) {
            return Err(EvalError::Split(alloc::format!("category {id} is not in the category table")));
        }
        if let Some(g) = &groups {
            let all: Vec<&ClassId> = g.rare.iter().chain(&g.common).chain(&g.frequent).collect();
            if let Some(id) = all.iter().find(|id| !base.contains(id) && !novel.contains(id)) {
                return Err(EvalError::Split(alloc::format!("grouped category {id} is neither base nor novel")));
            }
            let distinct: BTreeSet<&ClassId> = all.iter().copied().collect();
            if distinct.len() != all.len() {
                return Err(EvalError::Split("a category appears in two frequency groups".into()));
            }
        }
        Ok(CategorySplit { base, novel, groups })
    }

    pub fn base(&self) -> &BTreeSet<ClassId> {
        &self.base
    }

    pub fn novel(&self) -> &BTreeSet<ClassId> {
        &self.novel
    }

    pub fn groups(&self) -> Option<&FrequencyGroups> {
        self.groups.as_ref()
    }

    pub fn contains(&self, id: ClassId) -> bool {
        self.base.contains(&id) || self.novel.contains(&id)
    }

    /// Base and novel together, ascending.
    pub fn evaluated(&self) -> BTreeSet<ClassId> {
        self.base.union(&self.novel).copied().collect()
    }
}

/// TP/FP flag per detection of one (image, class) pair. `dets` must be in
/// descending score order.
pub fn match_detections(dets: &[BBox], gts: &[BBox], iou_threshold: f64) -> Vec<bool> {
    let mut taken = alloc::vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let o = iou(d, gt);
                if o >= iou_threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// 101-point interpolated AP from ranked TP flags.
pub fn average_precision(flags: &[bool], total_gt: usize) -> f64 {
    if total_gt == 0 || flags.is_empty() {
        return 0.0;
    }
    let mut tp = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let (mut t, mut f) = (0usize, 0usize);
    for &hit in flags {
        if hit {
            t += 1;
        } else {
            f += 1;
        }
        tp.push(t);
        precision.push(t as f64 / (t + f) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    // Recall tp/total_gt reaches level r/100 iff 100 * tp >= r * total_gt.
    let mut sum = 0.0;
    let mut i = 0;
    for r in 0..=100usize {
        while i < tp.len() && 100 * tp[i] < r * total_gt {
            i += 1;
        }
        if i == tp.len() {
            break;
        }
        sum += precision[i];
    }
    sum / 101.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Protocol {
    /// Novel / Base / Overall AP50 with all classes competing jointly.
    GeneralizedAp50,
    /// Additionally APr / APc / APf over frequency groups.
    LvisGroups,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassAp {
    pub ap: f64,
    pub num_gt: usize,
    pub num_dets: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupMetrics {
    pub rare: Option<f64>,
    pub common: Option<f64>,
    pub frequent: Option<f64>,
    /// Mean of the three group APs that are defined.
    pub mean_of_groups: Option<f64>,
    /// Mean over all evaluated classes with ground truth.
    pub mean_over_classes: Option<f64>,
}

/// APs in `[0, 1]`. A group with no ground-truth-bearing class is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class: BTreeMap<ClassId, ClassAp>,
    pub novel: Option<f64>,
    pub base: Option<f64>,
    pub overall: Option<f64>,
    pub groups: Option<GroupMetrics>,
}

/// Mean AP over the classes of `ids` that have ground truth.
pub fn group_mean<'a>(per_class: &BTreeMap<ClassId, ClassAp>, ids: impl IntoIterator<Item = &'a ClassId>) -> Option<f64> {
    let aps: Vec<f64> = ids
        .into_iter()
        .filter_map(|id| per_class.get(id))
        .filter(|c| c.num_gt > 0)
        .map(|c| c.ap)
        .collect();
    if aps.is_empty() {
        None
    } else {
        Some(aps.iter().sum::<f64>() / aps.len() as f64)
    }
}

fn det_order(a: &(usize, &Detection), b: &(usize, &Detection)) -> Ordering {
    crate::postprocess::score_order(a.1, b.1).then(a.0.cmp(&b.0))
}

/// Per-class AP50 and group means.
pub fn evaluate(
    dets: &[Detection],
    gt: &GroundTruthSet,
    split: &CategorySplit,
    protocol: Protocol,
) -> Result<MetricsReport, EvalError> {
    let evaluated = split.evaluated();
    // class -> image -> detections with their input index
    let mut by_class: BTreeMap<ClassId, BTreeMap<ImageId, Vec<(usize, &Detection)>>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        if !evaluated.contains(&d.class_id) {
            return Err(EvalError::UnknownClass(d.class_id));
        }
        if !gt.images.contains_key(&d.image_id) {
            return Err(EvalError::UnknownImage(d.image_id));
        }
        by_class
            .entry(d.class_id)
            .or_default()
            .entry(d.image_id)
            .or_default()
            .push((i, d));
    }
    let mut gts: BTreeMap<(ClassId, ImageId), Vec<BBox>> = BTreeMap::new();
    for a in &gt.annotations {
        if evaluated.contains(&a.class_id) {
            gts.entry((a.class_id, a.image_id)).or_default().push(a.bbox);
        }
    }

    let mut per_class = BTreeMap::new();
    for &class in &evaluated {
        let num_gt: usize = gts.range((class, ImageId::MIN)..=(class, ImageId::MAX)).map(|(_, v)| v.len()).sum();
        // (score, image, rank within image, tp)
        let mut ranked: Vec<(f64, ImageId, usize, bool)> = Vec::new();
        if let Some(images) = by_class.get_mut(&class) {
            for (&image, list) in images.iter_mut() {
                list.sort_by(det_order);
                let boxes: Vec<BBox> = list.iter().map(|(_, d)| d.bbox).collect();
                let empty = Vec::new();
                let g = gts.get(&(class, image)).unwrap_or(&empty);
                let flags = match_detections(&boxes, g, AP50_IOU);
                ranked.extend(
                    list.iter()
                        .zip(flags)
                        .enumerate()
                        .map(|(rank, ((_, d), tp))| (d.score, image, rank, tp)),
                );
            }
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let flags: Vec<bool> = ranked.iter().map(|r| r.3).collect();
        per_class.insert(
            class,
            ClassAp {
                ap: average_precision(&flags, num_gt),
                num_gt,
                num_dets: flags.len(),
            },
        );
    }

    let groups = match protocol {
        Protocol::GeneralizedAp50 => None,
        Protocol::LvisGroups => {
            let g = split
                .groups
                .as_ref()
                .ok_or_else(|| EvalError::Split("lvis-groups protocol needs frequency groups".into()))?;
            let rare = group_mean(&per_class, &g.rare);
            let common = group_mean(&per_class, &g.common);
            let frequent = group_mean(&per_class, &g.frequent);
            let defined: Vec<f64> = [rare, common, frequent].into_iter().flatten().collect();
            Some(GroupMetrics {
                rare,
                common,
                frequent,
                mean_of_groups: if defined.is_empty() {
                    None
                } else {
                    Some(defined.iter().sum::<f64>() / defined.len() as f64)
                },
                mean_over_classes: group_mean(&per_class, &evaluated),
            })
        }
    };

    Ok(MetricsReport {
        novel: group_mean(&per_class, &split.novel),
        base: group_mean(&per_class, &split.base),
        overall: group_mean(&per_class, &evaluated),
        per_class,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;
    use alloc::vec;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn cats(ids: &[ClassId]) -> BTreeMap<ClassId, String> {
        ids.iter().map(|&i| (i, alloc::format!("c{i}"))).collect()
    }

    fn extent(w: u32, h: u32) -> ImageExtent {
        ImageExtent::new(w, h).unwrap()
    }

    /// The 101-point rule written directly from its definition: for every
    /// recall level, the best precision at any rank whose recall reaches it.
    fn ap_oracle(flags: &[bool], total_gt: usize) -> f64 {
        if total_gt == 0 {
            return 0.0;
        }
        let mut pts = vec![];
        let mut tp = 0.0;
        for (i, &f) in flags.iter().enumerate() {
            if f {
                tp += 1.0;
            }
            pts.push((tp / total_gt as f64, tp / (i as f64 + 1.0)));
        }
        (0..=100)
            .map(|r| {
                let level = r as f64 / 100.0;
                pts.iter()
                    .filter(|(rec, _)| *rec >= level)
                    .map(|(_, p)| *p)
                    .fold(0.0, f64::max)
            })
            .sum::<f64>()
            / 101.0
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true], 1), 1.0);
        assert_eq!(average_precision(&[false], 1), 0.0);
        assert_eq!(average_precision(&[], 0), 0.0);
        assert_eq!(average_precision(&[], 3), 0.0);
        // Levels 0..=50 see precision 1, levels 51..=100 see 2/3.
        let expect = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
        let oracle = ap_oracle(&[true, false, true], 2);
        assert!((oracle - expect).abs() < 1e-15);
        assert!((average_precision(&[true, false, true], 2) - oracle).abs() < 1e-15);
    }

    #[test]
    fn ap_matches_oracle_on_random_flags() {
        let mut rng = Prng::new(21);
        for _ in 0..2000 {
            let n = rng.below(15) as usize;
            let flags: Vec<bool> = (0..n).map(|_| rng.unit_f64() < 0.5).collect();
            let hits = flags.iter().filter(|f| **f).count();
            let total = hits + rng.below(4) as usize;
            assert!((average_precision(&flags, total) - ap_oracle(&flags, total)).abs() < 1e-12);
        }
    }

    #[test]
    fn match_examples() {
        let g = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(match_detections(&[g], &[g], 0.5), vec![true]);
        assert_eq!(match_detections(&[g, g], &[g], 0.5), vec![true, false]);
        // The second detection takes the other GT even though it overlaps the first one more.
        let g2 = b(2.0, 0.0, 12.0, 10.0);
        assert_eq!(match_detections(&[g, g], &[g, g2], 0.5), vec![true, true]);
        assert_eq!(match_detections(&[b(20.0, 20.0, 30.0, 30.0)], &[g], 0.5), vec![false]);
    }

    #[test]
    fn dataset_validation() {
        let ok = GroundTruthSet::new(
            [(1, extent(10, 10))],
            vec![Annotation { image_id: 1, class_id: 1, bbox: b(1.0, 1.0, 5.0, 5.0) }],
            cats(&[1]),
        )
        .unwrap();
        assert_eq!(ok.annotations().len(), 1);
        let dangling = GroundTruthSet::new(
            [(1, extent(10, 10))],
            vec![Annotation { image_id: 2, class_id: 1, bbox: b(1.0, 1.0, 5.0, 5.0) }],
            cats(&[1]),
        );
        assert!(matches!(dangling, Err(EvalError::Schema(_))));
        let outside = GroundTruthSet::new(
            [(1, extent(10, 10))],
            vec![Annotation { image_id: 1, class_id: 1, bbox: b(1.0, 1.0, 15.0, 5.0) }],
            cats(&[1]),
        );
        assert!(matches!(outside, Err(EvalError::Schema(_))));

        assert!(matches!(CategorySplit::new([1], [1], None, &cats(&[1])), Err(EvalError::Split(_))));
        assert!(matches!(CategorySplit::new([1], [2], None, &cats(&[1])), Err(EvalError::Split(_))));
        let groups = FrequencyGroups {
            rare: [1].into(),
            common: [1].into(),
            ..Default::default()
        };
        assert!(CategorySplit::new([1], [2], Some(groups), &cats(&[1, 2])).is_err());
    }

    fn det(image_id: ImageId, class_id: ClassId, bbox: BBox, score: f64) -> Detection {
        Detection { image_id, class_id, bbox, score }
    }

    #[test]
    fn perfect_and_empty() {
        let boxes = [b(0.0, 0.0, 10.0, 10.0), b(20.0, 20.0, 30.0, 30.0)];
        let gt = GroundTruthSet::new(
            [(1, extent(50, 50))],
            vec![
                Annotation { image_id: 1, class_id: 1, bbox: boxes[0] },
                Annotation { image_id: 1, class_id: 2, bbox: boxes[1] },
            ],
            cats(&[1, 2]),
        )
        .unwrap();
        let split = CategorySplit::new([1], [2], None, gt.categories()).unwrap();
        let dets = [det(1, 1, boxes[0], 0.9), det(1, 2, boxes[1], 0.8)];
        let r = evaluate(&dets, &gt, &split, Protocol::GeneralizedAp50).unwrap();
        assert_eq!((r.novel, r.base, r.overall), (Some(1.0), Some(1.0), Some(1.0)));
        let r = evaluate(&[], &gt, &split, Protocol::GeneralizedAp50).unwrap();
        assert_eq!((r.novel, r.base, r.overall), (Some(0.0), Some(0.0), Some(0.0)));
        assert_eq!(
            evaluate(&[det(1, 3, boxes[0], 0.5)], &gt, &split, Protocol::GeneralizedAp50),
            Err(EvalError::UnknownClass(3))
        );
        assert!(evaluate(&[], &gt, &split, Protocol::LvisGroups).is_err());

        // Duplicate perfect detections lower the class AP.
        let dup = [dets[0], det(1, 1, boxes[0], 0.95)];
        let r = evaluate(&dup, &gt, &split, Protocol::GeneralizedAp50).unwrap();
        assert_eq!(r.per_class[&1].ap, 1.0);
        let dup = [dets[0], det(1, 1, boxes[0], 0.5), det(1, 1, boxes[1], 0.95)];
        let r = evaluate(&dup, &gt, &split, Protocol::GeneralizedAp50).unwrap();
        assert!(r.per_class[&1].ap < 1.0);
    }

    #[test]
    fn lvis_groups() {
        let boxes = [b(0.0, 0.0, 10.0, 10.0), b(20.0, 20.0, 30.0, 30.0), b(0.0, 20.0, 10.0, 30.0)];
        let gt = GroundTruthSet::new(
            [(1, extent(50, 50))],
            (0..3)
                .map(|i| Annotation { image_id: 1, class_id: i as u64 + 1, bbox: boxes[i] })
                .collect(),
            cats(&[1, 2, 3]),
        )
        .unwrap();
        let groups = FrequencyGroups {
            rare: [1].into(),
            common: [2].into(),
            frequent: [3].into(),
        };
        let split = CategorySplit::new([2, 3], [1], Some(groups), gt.categories()).unwrap();
        let dets = [det(1, 1, boxes[0], 0.9), det(1, 3, boxes[2], 0.9)];
        let r = evaluate(&dets, &gt, &split, Protocol::LvisGroups).unwrap();
        let g = r.groups.unwrap();
        assert_eq!((g.rare, g.common, g.frequent), (Some(1.0), Some(0.0), Some(1.0)));
        assert!((g.mean_of_groups.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.mean_over_classes.unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }
}
