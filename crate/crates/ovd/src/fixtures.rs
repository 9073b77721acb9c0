//! Fixture bundles: a JSON manifest indexing OVDT tensors with SHA-256
//! digests.
//!
//! Tensor keys:
//!
//! | key                      | shape        | content                          |
//! |--------------------------|--------------|----------------------------------|
//! | `image/{id}`             | `[C, H, W]`  | pixels in `[0, 1]`               |
//! | `features/{id}/stage{k}` | `[C, h, w]`  | trunk output after `k` stages    |
//! | `proposals/{id}`         | `[N, 5]`     | `x1, y1, x2, y2, objectness`     |
//! | `text_embeddings`        | `[K, P, D]`  | per-class per-prompt embeddings  |
//!
//! Paths are relative to the manifest. `classes` lists the row order of
//! `text_embeddings`; `backbone` names the stub whose tail encodes regions.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ovd_core::classify::PromptSet;
use ovd_core::providers::{
    make_stub, ArchSpec, Proposal, ProposalProvider, ProposalSource, ReplayBackbone, StagedBackbone,
};
use ovd_core::{BBox, FeatureMap, Image, ImageExtent, ImageId};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ovdt::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageMeta {
    pub id: ImageId,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassMeta {
    pub id: u64,
    pub name: String,
}

/// Seed and architecture of a stub backbone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubSpec {
    pub seed: u64,
    #[serde(default)]
    pub arch: ArchSpec,
}

impl StubSpec {
    pub fn build(&self) -> Result<StagedBackbone> {
        make_stub(self.seed, &self.arch).map_err(Error::config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub images: Vec<ImageMeta>,
    pub tensors: BTreeMap<String, String>,
    pub sha256: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub classes: Vec<ClassMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<StubSpec>,
}

pub fn image_key(id: ImageId) -> String {
    format!("image/{id}")
}

pub fn features_key(id: ImageId, stage: usize) -> String {
    format!("features/{id}/stage{stage}")
}

pub fn proposals_key(id: ImageId) -> String {
    format!("proposals/{id}")
}

pub const TEXT_EMBEDDINGS_KEY: &str = "text_embeddings";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Everything a pipeline needs, replayed from a bundle.
#[derive(Debug, Clone)]
pub struct Fixtures {
    pub manifest: Manifest,
    pub root: PathBuf,
    pub images: BTreeMap<ImageId, Image>,
    pub encoder: ReplayBackbone,
    pub proposals: ProposalProvider,
    pub prompts: Vec<PromptSet>,
}

impl Fixtures {
    pub fn backbone(&self) -> &StagedBackbone {
        self.encoder.backbone()
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::schema(format!("{}: {e}", path.display())))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::schema(format!("unsupported manifest version {}", m.version)));
    }
    Ok(m)
}

/// Read every tensor of a manifest, verifying its digest.
pub fn read_verified(manifest: &Manifest, root: &Path) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for (key, rel) in &manifest.tensors {
        let expected = manifest
            .sha256
            .get(key)
            .ok_or_else(|| Error::Integrity(format!("no sha256 recorded for tensor {key}")))?;
        let path = root.join(rel);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let actual = sha256_hex(&bytes);
        if !actual.eq_ignore_ascii_case(expected) {
            return Err(Error::Integrity(format!(
                "sha256 mismatch for {key} ({}): expected {expected}, got {actual}",
                path.display()
            )));
        }
        let t = Tensor::from_bytes(&bytes).map_err(|e| match e {
            Error::Integrity(m) | Error::Schema(m) => Error::Schema(format!("{key}: {m}")),
            other => other,
        })?;
        out.insert(key.clone(), t);
    }
    if let Some(extra) = manifest.sha256.keys().find(|k| !manifest.tensors.contains_key(*k)) {
        return Err(Error::schema(format!("sha256 entry {extra} has no tensor")));
    }
    Ok(out)
}

fn take<'a>(tensors: &'a BTreeMap<String, Tensor>, key: &str) -> Result<&'a Tensor> {
    tensors
        .get(key)
        .ok_or_else(|| Error::schema(format!("manifest lacks tensor {key}")))
}

/// Load and cross-check a bundle.
pub fn load_fixtures(manifest_path: &Path) -> Result<Fixtures> {
    let manifest = read_manifest(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let tensors = read_verified(&manifest, &root)?;
    let spec = manifest
        .backbone
        .clone()
        .ok_or_else(|| Error::schema("manifest lacks the backbone field"))?;
    let backbone = make_stub(spec.seed, &spec.arch).map_err(Error::schema)?;
    let split = backbone.split();
    let stride: f64 = spec.arch.stages[..split].iter().map(|s| s.stride as f64).product();

    let mut images = BTreeMap::new();
    let mut features = BTreeMap::new();
    let mut proposal_lists = Vec::new();
    for meta in &manifest.images {
        let extent = ImageExtent::new(meta.width, meta.height).map_err(Error::schema)?;
        let t = take(&tensors, &image_key(meta.id))?;
        let [c, h, w] = shape3(t, &image_key(meta.id))?;
        if (h, w) != (meta.height as usize, meta.width as usize) {
            return Err(Error::schema(format!(
                "image {} is {w}x{h} but the manifest says {}x{}",
                meta.id, meta.width, meta.height
            )));
        }
        let img = Image::new(c, h, w, t.data.clone()).map_err(|e| Error::schema(format!("image {}: {e}", meta.id)))?;
        images.insert(meta.id, img);

        let fkey = features_key(meta.id, split);
        let t = take(&tensors, &fkey)?;
        let [fc, fh, fw] = shape3(t, &fkey)?;
        let fm = FeatureMap::new(fc, fh, fw, t.data.clone(), stride).map_err(|e| Error::schema(format!("{fkey}: {e}")))?;
        features.insert(meta.id, fm);

        let pkey = proposals_key(meta.id);
        let t = take(&tensors, &pkey)?;
        proposal_lists.push((meta.id, extent, decode_proposals(t, &pkey)?));
    }
    let encoder = ReplayBackbone::new(backbone, features).map_err(Error::schema)?;
    let proposals = ProposalProvider::new(ProposalSource::Fixture, proposal_lists).map_err(Error::schema)?;

    let t = take(&tensors, TEXT_EMBEDDINGS_KEY)?;
    let [k, p, d] = shape3(t, TEXT_EMBEDDINGS_KEY)?;
    if k != manifest.classes.len() {
        return Err(Error::schema(format!(
            "text embeddings have {k} classes, manifest lists {}",
            manifest.classes.len()
        )));
    }
    let dim = encoder.backbone().embed_dim();
    if d != dim {
        return Err(Error::schema(format!(
            "text embeddings have dimension {d}, backbone embeddings have {dim}"
        )));
    }
    let prompts = manifest
        .classes
        .iter()
        .enumerate()
        .map(|(i, c)| PromptSet {
            class_id: c.id,
            name: c.name.clone(),
            prompts: (0..p).map(|j| t.data[(i * p + j) * d..(i * p + j + 1) * d].to_vec()).collect(),
        })
        .collect();

    Ok(Fixtures {
        manifest,
        root,
        images,
        encoder,
        proposals,
        prompts,
    })
}

fn shape3(t: &Tensor, key: &str) -> Result<[usize; 3]> {
    match t.dims_usize()[..] {
        [a, b, c] => Ok([a, b, c]),
        _ => Err(Error::schema(format!("{key} must be rank 3, has shape {:?}", t.dims))),
    }
}

pub fn decode_proposals(t: &Tensor, key: &str) -> Result<Vec<Proposal>> {
    match t.dims_usize()[..] {
        [_, 5] => {}
        _ => return Err(Error::schema(format!("{key} must have shape [N, 5], has {:?}", t.dims))),
    }
    t.data
        .chunks_exact(5)
        .map(|r| {
            let bbox = BBox::new(r[0].into(), r[1].into(), r[2].into(), r[3].into())
                .map_err(|e| Error::schema(format!("{key}: {e}")))?;
            Ok(Proposal {
                bbox,
                objectness: r[4].into(),
            })
        })
        .collect()
}

pub fn encode_proposals(list: &[Proposal]) -> Tensor {
    let data = list
        .iter()
        .flat_map(|p| {
            [p.bbox.x1, p.bbox.y1, p.bbox.x2, p.bbox.y2, p.objectness].map(|v| v as f32)
        })
        .collect();
    Tensor::new(vec![list.len() as u64, 5], data).expect("shape matches data")
}

pub fn map_tensor(m: &FeatureMap) -> Tensor {
    let [c, h, w] = m.shape();
    Tensor::new(vec![c as u64, h as u64, w as u64], m.data().to_vec()).expect("shape matches data")
}

/// Writes tensors under a root directory and records them in a manifest.
pub struct BundleWriter {
    root: PathBuf,
    manifest: Manifest,
}

impl BundleWriter {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(BundleWriter {
            root,
            manifest: Manifest {
                version: MANIFEST_VERSION,
                images: Vec::new(),
                tensors: BTreeMap::new(),
                sha256: BTreeMap::new(),
                classes: Vec::new(),
                backbone: None,
            },
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest_mut(&mut self) -> &mut Manifest {
        &mut self.manifest
    }

    pub fn add_tensor(&mut self, key: &str, rel_path: &str, t: &Tensor) -> Result<()> {
        let path = self.root.join(rel_path);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = t.to_bytes();
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        self.manifest.tensors.insert(key.into(), rel_path.into());
        self.manifest.sha256.insert(key.into(), sha256_hex(&bytes));
        Ok(())
    }

    /// Write `manifest.json` and return its path.
    pub fn finish(self) -> Result<PathBuf> {
        let path = self.root.join("manifest.json");
        write_json(&path, &self.manifest)?;
        Ok(path)
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::schema)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
