//! Deterministic synthetic bundles: patterned objects on noisy backgrounds,
//! with ground truth, proposals, trunk features and prompt embeddings.

use std::path::{Path, PathBuf};

use ovd_core::classify::{build_bank, PromptSet};
use ovd_core::providers::{make_stub, ArchSpec, Proposal, StagedBackbone};
use ovd_core::rng::Prng;
use ovd_core::{BBox, Image, ImageId};
use serde::{Deserialize, Serialize};

use crate::bankfile::write_bank;
use crate::coco::{CocoAnnotation, CocoCategory, CocoDataset, CocoImage, GroupsFile, SplitFile};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fixtures::{
    encode_proposals, features_key, image_key, map_tensor, proposals_key, write_json, BundleWriter, ClassMeta,
    ImageMeta, StubSpec, TEXT_EMBEDDINGS_KEY,
};
use crate::ovdt::Tensor;

const COLORS: [[f32; 3]; 8] = [
    [0.90, 0.15, 0.10],
    [0.10, 0.80, 0.20],
    [0.15, 0.25, 0.90],
    [0.90, 0.85, 0.10],
    [0.85, 0.10, 0.80],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.50, 0.10, 0.70],
];

const NAMES: [&str; 8] = ["red", "green", "blue", "yellow", "magenta", "cyan", "orange", "purple"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub images: usize,
    pub image_size: usize,
    pub classes: usize,
    /// The last `novel` classes form the novel split.
    pub novel: usize,
    pub max_objects: usize,
    pub prompts: usize,
    pub proposals: usize,
    pub arch: ArchSpec,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 7,
            images: 4,
            image_size: 128,
            classes: 4,
            novel: 2,
            max_objects: 3,
            prompts: 4,
            proposals: 150,
            arch: ArchSpec::default(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.images == 0 || self.classes == 0 || self.prompts == 0 || self.max_objects == 0 {
            return Err(Error::config("images, classes, prompts and max_objects must be positive"));
        }
        if self.novel > self.classes {
            return Err(Error::config("more novel classes than classes"));
        }
        if self.image_size < 32 {
            return Err(Error::config("image_size must be at least 32"));
        }
        if self.proposals < self.max_objects * 6 {
            return Err(Error::config("proposals must leave room for the jittered object boxes"));
        }
        self.arch.validate().map_err(Error::config)
    }

    pub fn class_ids(&self) -> Vec<u64> {
        (1..=self.classes as u64).collect()
    }

    pub fn class_name(&self, id: u64) -> String {
        let i = (id - 1) as usize;
        match NAMES.get(i) {
            Some(n) => format!("{n} block"),
            None => format!("class {id}"),
        }
    }
}

/// Pattern of class index `c` at normalized object coordinates `(u, v)`.
pub fn pattern(c: usize, u: f64, v: f64) -> [f32; 3] {
    let (a, b) = ((u * 4.0).floor() as i64, (v * 4.0).floor() as i64);
    let s = (a + (c % 3) as i64 * b).rem_euclid(2) as f32;
    let color = COLORS[c % COLORS.len()];
    let gain = 0.55 + 0.45 * s;
    color.map(|ch| ch * gain)
}

/// A `size x size` rendering of one class pattern.
pub fn render_pattern(c: usize, size: usize) -> Image {
    let mut data = vec![0.0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let px = pattern(c, (x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
            for ch in 0..3 {
                data[(ch * size + y) * size + x] = px[ch];
            }
        }
    }
    Image::new(3, size, size, data).expect("pattern stays in [0, 1]")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthObject {
    pub class_id: u64,
    pub bbox: BBox,
}

#[derive(Debug, Clone)]
pub struct SynthImage {
    pub id: ImageId,
    pub image: Image,
    pub objects: Vec<SynthObject>,
    pub proposals: Vec<Proposal>,
}

/// Integer-aligned objects make the ground-truth boxes exact.
pub fn synth_image(spec: &SynthSpec, id: ImageId, rng: &mut Prng) -> SynthImage {
    let s = spec.image_size;
    let mut data = vec![0.0f32; 3 * s * s];
    for v in data.iter_mut() {
        *v = 0.45 + rng.symmetric_f32(0.08);
    }
    let n = 1 + rng.below(spec.max_objects as u64) as usize;
    let mut objects = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.below(spec.classes as u64) as usize;
        let (lo, hi) = (s / 6, (s * 2) / 5);
        let w = lo + rng.below((hi - lo + 1) as u64) as usize;
        let h = lo + rng.below((hi - lo + 1) as u64) as usize;
        let x0 = rng.below((s - w + 1) as u64) as usize;
        let y0 = rng.below((s - h + 1) as u64) as usize;
        for y in 0..h {
            for x in 0..w {
                let px = pattern(c, (x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
                for ch in 0..3 {
                    data[(ch * s + y0 + y) * s + x0 + x] = px[ch];
                }
            }
        }
        let bbox = BBox::from_xywh(x0 as f64, y0 as f64, w as f64, h as f64).expect("positive size");
        objects.push(SynthObject {
            class_id: c as u64 + 1,
            bbox,
        });
    }
    let image = Image::new(3, s, s, data).expect("pixels stay in [0, 1]");

    let sf = s as f64;
    let mut proposals = Vec::with_capacity(spec.proposals);
    for o in &objects {
        let (w, h) = (o.bbox.width(), o.bbox.height());
        for _ in 0..6 {
            let j = |rng: &mut Prng, side: f64| 0.06 * side * rng.normalish();
            let x1 = (o.bbox.x1 + j(rng, w)).clamp(0.0, sf - 2.0);
            let y1 = (o.bbox.y1 + j(rng, h)).clamp(0.0, sf - 2.0);
            let x2 = (o.bbox.x2 + j(rng, w)).clamp(x1 + 1.0, sf);
            let y2 = (o.bbox.y2 + j(rng, h)).clamp(y1 + 1.0, sf);
            proposals.push(Proposal {
                bbox: BBox::new(x1, y1, x2, y2).expect("ordered"),
                objectness: rng.uniform(0.5, 4.0),
            });
        }
    }
    while proposals.len() < spec.proposals {
        let w = rng.uniform(8.0, sf / 2.0);
        let h = rng.uniform(8.0, sf / 2.0);
        let x1 = rng.uniform(0.0, sf - w);
        let y1 = rng.uniform(0.0, sf - h);
        proposals.push(Proposal {
            bbox: BBox::from_xywh(x1, y1, w, h).expect("positive size"),
            objectness: rng.uniform(-4.0, 1.0),
        });
    }
    // Round through f32 so in-memory proposals equal the stored ones.
    for p in &mut proposals {
        let r = |v: f64| f64::from(v as f32);
        p.bbox = BBox::new(r(p.bbox.x1), r(p.bbox.y1), r(p.bbox.x2), r(p.bbox.y2)).expect("ordered");
        p.objectness = r(p.objectness);
    }
    SynthImage {
        id,
        image,
        objects,
        proposals,
    }
}

/// Per-class prompt embeddings: the embedding of the class pattern plus
/// small noise for every prompt.
pub fn synth_prompts(spec: &SynthSpec, backbone: &StagedBackbone, rng: &mut Prng) -> Result<Vec<PromptSet>> {
    spec.class_ids()
        .into_iter()
        .map(|id| {
            let proto = backbone
                .encode_crop(&render_pattern((id - 1) as usize, backbone.input_size()))
                .map_err(Error::config)?;
            let prompts = (0..spec.prompts)
                .map(|_| {
                    proto
                        .as_slice()
                        .iter()
                        .map(|&v| v + (0.05 * rng.normalish()) as f32)
                        .collect()
                })
                .collect();
            Ok(PromptSet {
                class_id: id,
                name: spec.class_name(id),
                prompts,
            })
        })
        .collect()
}

/// Write a complete bundle under `out` and return the manifest path.
///
/// Besides the manifest and tensors, the directory receives `bank.ovdt`
/// (with `bank.json`), `annotations.json`, `split.json` and a ready-to-run
/// `detect.json`.
pub fn generate(spec: &SynthSpec, out: &Path) -> Result<PathBuf> {
    spec.validate()?;
    let backbone = make_stub(spec.seed, &spec.arch).map_err(Error::config)?;
    let mut rng = Prng::new(spec.seed ^ 0xa5a5_a5a5_a5a5_a5a5);
    let mut w = BundleWriter::new(out)?;
    let split = backbone.split();

    let mut coco = CocoDataset {
        images: Vec::new(),
        annotations: Vec::new(),
        categories: spec
            .class_ids()
            .into_iter()
            .map(|id| CocoCategory {
                id,
                name: spec.class_name(id),
            })
            .collect(),
    };
    for id in 1..=spec.images as u64 {
        let si = synth_image(spec, id, &mut rng);
        let feats = backbone.encode_full(si.image.as_map()).map_err(Error::config)?;
        w.add_tensor(&image_key(id), &format!("images/{id}.ovdt"), &map_tensor(si.image.as_map()))?;
        w.add_tensor(&features_key(id, split), &format!("features/{id}_stage{split}.ovdt"), &map_tensor(&feats))?;
        w.add_tensor(&proposals_key(id), &format!("proposals/{id}.ovdt"), &encode_proposals(&si.proposals))?;
        let s = spec.image_size as u32;
        w.manifest_mut().images.push(ImageMeta {
            id,
            width: s,
            height: s,
        });
        coco.images.push(CocoImage {
            id,
            width: s,
            height: s,
            file_name: None,
        });
        for o in si.objects {
            coco.annotations.push(CocoAnnotation {
                id: Some(coco.annotations.len() as u64 + 1),
                image_id: id,
                category_id: o.class_id,
                bbox: o.bbox.to_xywh(),
                iscrowd: None,
            });
        }
    }

    let prompts = synth_prompts(spec, &backbone, &mut rng)?;
    let d = spec.arch.embed_dim;
    let data: Vec<f32> = prompts.iter().flat_map(|p| p.prompts.iter().flatten().copied()).collect();
    let text = Tensor::new(vec![spec.classes as u64, spec.prompts as u64, d as u64], data)?;
    w.add_tensor(TEXT_EMBEDDINGS_KEY, "text_embeddings.ovdt", &text)?;
    w.manifest_mut().classes = prompts
        .iter()
        .map(|p| ClassMeta {
            id: p.class_id,
            name: p.name.clone(),
        })
        .collect();
    w.manifest_mut().backbone = Some(StubSpec {
        seed: spec.seed,
        arch: spec.arch.clone(),
    });

    let bank = build_bank(&prompts).map_err(Error::config)?;
    write_bank(&out.join("bank.ovdt"), &bank)?;

    let ids = spec.class_ids();
    let (base, novel) = ids.split_at(spec.classes - spec.novel);
    let (common, frequent) = base.split_at(base.len() / 2);
    write_json(&out.join("annotations.json"), &coco)?;
    write_json(
        &out.join("split.json"),
        &SplitFile {
            base: base.to_vec(),
            novel: novel.to_vec(),
            groups: Some(GroupsFile {
                rare: novel.to_vec(),
                common: common.to_vec(),
                frequent: frequent.to_vec(),
            }),
        },
    )?;
    let mut run = RunConfig::new("manifest.json");
    run.output = Some("detections.json".into());
    run.bank = Some("bank.ovdt".into());
    write_json(&out.join("detect.json"), &run)?;
    w.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn objects_are_painted_inside_the_image() {
        let spec = SynthSpec::default();
        let mut rng = Prng::new(1);
        for id in 0..20 {
            let si = synth_image(&spec, id, &mut rng);
            assert!(!si.objects.is_empty() && si.objects.len() <= spec.max_objects);
            assert_eq!(si.proposals.len(), spec.proposals);
            let s = spec.image_size as f64;
            for o in &si.objects {
                assert!(o.bbox.x1 >= 0.0 && o.bbox.y1 >= 0.0 && o.bbox.x2 <= s && o.bbox.y2 <= s);
                assert_eq!(o.bbox.x1.fract(), 0.0);
            }
            for p in &si.proposals {
                assert!(p.bbox.x1 >= 0.0 && p.bbox.x2 <= s && p.bbox.width() >= 1.0);
            }
        }
    }

    #[test]
    fn patterns_differ_between_classes() {
        let a = render_pattern(0, 16);
        for c in 1..8 {
            assert_ne!(a.as_map().data(), render_pattern(c, 16).as_map().data());
        }
    }

    #[test]
    fn same_seed_same_image() {
        let spec = SynthSpec::default();
        let a = synth_image(&spec, 1, &mut Prng::new(3));
        let b = synth_image(&spec, 1, &mut Prng::new(3));
        assert_eq!(a.image.as_map().data(), b.image.as_map().data());
        assert_eq!(a.objects, b.objects);
        assert_eq!(a.proposals, b.proposals);
    }
}
