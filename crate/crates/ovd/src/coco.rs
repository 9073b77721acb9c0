//! COCO-style annotations, detection results and category splits.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ovd_core::eval::{Annotation, CategorySplit, FrequencyGroups, GroundTruthSet};
use ovd_core::{BBox, Detection, ImageExtent};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, w, h]`.
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iscrowd: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

/// Unknown top-level fields (`info`, `licenses`, ...) are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupsFile {
    pub rare: Vec<u64>,
    pub common: Vec<u64>,
    pub frequent: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFile {
    pub base: Vec<u64>,
    pub novel: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<GroupsFile>,
}

/// One entry of a results file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CocoResult {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

impl From<&Detection> for CocoResult {
    fn from(d: &Detection) -> Self {
        CocoResult {
            image_id: d.image_id,
            category_id: d.class_id,
            bbox: d.bbox.to_xywh(),
            score: d.score,
        }
    }
}

impl TryFrom<CocoResult> for Detection {
    type Error = Error;

    fn try_from(r: CocoResult) -> Result<Self> {
        let [x, y, w, h] = r.bbox;
        let bbox = BBox::from_xywh(x, y, w, h).map_err(|e| {
            Error::schema(format!("detection on image {}: {e}", r.image_id))
        })?;
        if !r.score.is_finite() {
            return Err(Error::schema(format!("detection on image {} has a non-finite score", r.image_id)));
        }
        Ok(Detection {
            image_id: r.image_id,
            class_id: r.category_id,
            bbox,
            score: r.score,
        })
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::schema(format!("{}: {e}", path.display())))
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let raw: Vec<CocoResult> = read_json(path)?;
    raw.into_iter().map(Detection::try_from).collect()
}

pub fn detections_json(dets: &[Detection]) -> String {
    let rows: Vec<CocoResult> = dets.iter().map(CocoResult::from).collect();
    let mut s = serde_json::to_string_pretty(&rows).expect("results serialize");
    s.push('\n');
    s
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    fs::write(path, detections_json(dets)).map_err(|e| Error::io(path, e))
}

impl CocoDataset {
    /// Convert to a ground-truth set. Crowd annotations are rejected rather
    /// than silently ignored.
    pub fn ground_truth(&self) -> Result<GroundTruthSet> {
        let mut anns = Vec::with_capacity(self.annotations.len());
        for a in &self.annotations {
            if a.iscrowd.unwrap_or(0) != 0 {
                return Err(Error::schema(format!(
                    "crowd annotations are not supported (image {}, category {})",
                    a.image_id, a.category_id
                )));
            }
            let [x, y, w, h] = a.bbox;
            let bbox = BBox::from_xywh(x, y, w, h)
                .map_err(|e| Error::schema(format!("annotation on image {}: {e}", a.image_id)))?;
            anns.push(Annotation {
                image_id: a.image_id,
                class_id: a.category_id,
                bbox,
            });
        }
        let mut images = Vec::with_capacity(self.images.len());
        for i in &self.images {
            let extent = ImageExtent::new(i.width, i.height)
                .map_err(|e| Error::schema(format!("image {}: {e}", i.id)))?;
            images.push((i.id, extent));
        }
        GroundTruthSet::new(
            images,
            anns,
            self.categories.iter().map(|c| (c.id, c.name.clone())),
        )
        .map_err(Error::schema)
    }
}

impl SplitFile {
    pub fn to_split(&self, gt: &GroundTruthSet) -> Result<CategorySplit> {
        let groups = self.groups.as_ref().map(|g| FrequencyGroups {
            rare: g.rare.iter().copied().collect::<BTreeSet<_>>(),
            common: g.common.iter().copied().collect(),
            frequent: g.frequent.iter().copied().collect(),
        });
        CategorySplit::new(
            self.base.iter().copied(),
            self.novel.iter().copied(),
            groups,
            gt.categories(),
        )
        .map_err(Error::schema)
    }
}

pub fn load_dataset(annotations: &Path, split: &Path) -> Result<(GroundTruthSet, CategorySplit)> {
    let ds: CocoDataset = read_json(annotations)?;
    let gt = ds.ground_truth()?;
    let sf: SplitFile = read_json(split)?;
    let split = sf.to_split(&gt)?;
    Ok((gt, split))
}
