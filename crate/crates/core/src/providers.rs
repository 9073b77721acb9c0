//! Sources of neural outputs: staged backbones and proposal lists.
//!
//! The stub backbone is a stack of small strided convolutions with ReLU,
//! followed by a projection head (global average pool, linear map, L2
//! normalization). Its weights come from [`Prng`] so that parameter counts,
//! feature maps and embeddings are reproducible from a seed.
//!
//! A backbone is split at index `k`: stages `0..k` encode the whole image
//! (the trunk), stages `k..` plus the head encode pooled regions.

use alloc::borrow::Cow;
use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::classify::Embedding;
use crate::geometry::{clip_box, BBox, ImageExtent};
use crate::math;
use crate::rng::Prng;
use crate::tensor::{FeatureMap, Image, TensorError};
use crate::ImageId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("backbone spec has no stages")]
    EmptySpec,
    #[error("invalid backbone spec: {0}")]
    InvalidSpec(&'static str),
    #[error("stage {stage} expects {expected} input channels, got {actual}")]
    ChannelMismatch {
        stage: usize,
        expected: usize,
        actual: usize,
    },
    #[error("crop must be {expected}x{expected} with {channels} channels, got {got_channels}x{got_h}x{got_w}")]
    InputSize {
        expected: usize,
        channels: usize,
        got_channels: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("weight array of length {actual} where {expected} expected")]
    WeightLength { expected: usize, actual: usize },
    #[error("embedding vanishes before normalization")]
    ZeroEmbedding,
    #[error("unknown image id {0}")]
    UnknownImage(ImageId),
    #[error("invalid proposal: {0}")]
    InvalidProposal(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Shape of one convolution stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct StageSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Architecture of a stub backbone.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ArchSpec {
    pub input_channels: usize,
    /// Side of the square crops accepted by `encode_crop`.
    pub input_size: usize,
    pub stages: Vec<StageSpec>,
    /// Number of trunk stages; `None` splits before the last stage.
    pub split: Option<usize>,
    pub embed_dim: usize,
}

impl Default for ArchSpec {
    /// Four 3x3 stages (4, 8, 16, 32 channels; strides 2, 2, 2, 1), trunk of
    /// three stages, 32-dimensional embeddings, 224-pixel crops.
    fn default() -> Self {
        let stage = |out_channels, stride| StageSpec {
            out_channels,
            kernel: 3,
            stride,
        };
        ArchSpec {
            input_channels: 3,
            input_size: 224,
            stages: vec![stage(4, 2), stage(8, 2), stage(16, 2), stage(32, 1)],
            split: None,
            embed_dim: 32,
        }
    }
}

impl ArchSpec {
    pub fn split_index(&self) -> usize {
        self.split.unwrap_or(self.stages.len().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.stages.is_empty() {
            return Err(ProviderError::EmptySpec);
        }
        let k = self.split_index();
        if k == 0 || k >= self.stages.len() {
            return Err(ProviderError::InvalidSpec("split index must satisfy 1 <= k < stages"));
        }
        if self.input_channels == 0 || self.embed_dim == 0 || self.input_size == 0 {
            return Err(ProviderError::InvalidSpec("channels, embedding dim and input size must be positive"));
        }
        if self
            .stages
            .iter()
            .any(|s| s.out_channels == 0 || s.kernel == 0 || s.stride == 0)
        {
            return Err(ProviderError::InvalidSpec("stage channels, kernel and stride must be positive"));
        }
        Ok(())
    }
}

/// `kernel x kernel` convolution with zero "same" padding, bias and ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    /// `[out][in][ky][kx]`
    weights: Vec<f32>,
    bias: Vec<f32>,
}

impl ConvStage {
    pub fn new(
        in_channels: usize,
        spec: StageSpec,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self, ProviderError> {
        let expected = spec.out_channels * in_channels * spec.kernel * spec.kernel;
        if weights.len() != expected {
            return Err(ProviderError::WeightLength {
                expected,
                actual: weights.len(),
            });
        }
        if bias.len() != spec.out_channels {
            return Err(ProviderError::WeightLength {
                expected: spec.out_channels,
                actual: bias.len(),
            });
        }
        Ok(ConvStage {
            in_channels,
            out_channels: spec.out_channels,
            kernel: spec.kernel,
            stride: spec.stride,
            weights,
            bias,
        })
    }

    pub fn param_count(&self) -> u64 {
        (self.weights.len() + self.bias.len()) as u64
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap, TensorError> {
        let (h, w) = (x.height(), x.width());
        let (k, s) = (self.kernel, self.stride);
        let pad = k / 2;
        let oh = (h + 2 * pad - k) / s + 1;
        let ow = (w + 2 * pad - k) / s + 1;
        let mut out = vec![0.0f32; self.out_channels * oh * ow];
        for (o, plane) in out.chunks_exact_mut(oh * ow).enumerate() {
            plane.fill(self.bias[o]);
            for i in 0..self.in_channels {
                let src = x.plane(i);
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = self.weights[((o * self.in_channels + i) * k + ky) * k + kx];
                        // Output columns whose input column ox*s + kx - pad is in range.
                        let ox_lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(s) };
                        let ox_hi = match (w + pad).checked_sub(kx) {
                            Some(span) => ow.min(span.div_ceil(s)),
                            None => 0,
                        };
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy * s + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let row = &src[(iy - pad) * w..(iy - pad + 1) * w];
                            let orow = &mut plane[oy * ow..(oy + 1) * ow];
                            for ox in ox_lo..ox_hi {
                                orow[ox] += wv * row[ox * s + kx - pad];
                            }
                        }
                    }
                }
            }
            for v in plane.iter_mut() {
                *v = v.max(0.0);
            }
        }
        FeatureMap::new(self.out_channels, oh, ow, out, x.stride() * s as f64)
    }
}

/// Global average pool, linear projection, L2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    in_channels: usize,
    dim: usize,
    /// `[dim][in]`
    weights: Vec<f32>,
    bias: Vec<f32>,
}

impl ProjectionHead {
    pub fn new(in_channels: usize, dim: usize, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self, ProviderError> {
        if weights.len() != dim * in_channels {
            return Err(ProviderError::WeightLength {
                expected: dim * in_channels,
                actual: weights.len(),
            });
        }
        if bias.len() != dim {
            return Err(ProviderError::WeightLength {
                expected: dim,
                actual: bias.len(),
            });
        }
        Ok(ProjectionHead {
            in_channels,
            dim,
            weights,
            bias,
        })
    }

    pub fn param_count(&self) -> u64 {
        (self.weights.len() + self.bias.len()) as u64
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<Embedding, ProviderError> {
        if x.channels() != self.in_channels {
            return Err(ProviderError::ChannelMismatch {
                stage: usize::MAX,
                expected: self.in_channels,
                actual: x.channels(),
            });
        }
        let cells = (x.height() * x.width()) as f64;
        let pooled: Vec<f64> = (0..self.in_channels)
            .map(|c| x.plane(c).iter().map(|&v| f64::from(v)).sum::<f64>() / cells)
            .collect();
        let projected: Vec<f64> = (0..self.dim)
            .map(|d| {
                let row = &self.weights[d * self.in_channels..(d + 1) * self.in_channels];
                f64::from(self.bias[d])
                    + row
                        .iter()
                        .zip(&pooled)
                        .map(|(&w, &p)| f64::from(w) * p)
                        .sum::<f64>()
            })
            .collect();
        Embedding::normalize_f64(projected).map_err(|_| ProviderError::ZeroEmbedding)
    }
}

/// A backbone split into a whole-image trunk and a per-region tail.
#[derive(Debug, Clone, PartialEq)]
pub struct StagedBackbone {
    input_channels: usize,
    input_size: usize,
    stages: Vec<ConvStage>,
    split: usize,
    head: ProjectionHead,
}

impl StagedBackbone {
    pub fn from_parts(
        input_channels: usize,
        input_size: usize,
        stages: Vec<ConvStage>,
        split: usize,
        head: ProjectionHead,
    ) -> Result<Self, ProviderError> {
        if stages.is_empty() {
            return Err(ProviderError::EmptySpec);
        }
        if split == 0 || split >= stages.len() {
            return Err(ProviderError::InvalidSpec("split index must satisfy 1 <= k < stages"));
        }
        let mut c = input_channels;
        for (i, s) in stages.iter().enumerate() {
            if s.in_channels != c {
                return Err(ProviderError::ChannelMismatch {
                    stage: i,
                    expected: s.in_channels,
                    actual: c,
                });
            }
            c = s.out_channels;
        }
        if head.in_channels != c {
            return Err(ProviderError::ChannelMismatch {
                stage: stages.len(),
                expected: head.in_channels,
                actual: c,
            });
        }
        Ok(StagedBackbone {
            input_channels,
            input_size,
            stages,
            split,
            head,
        })
    }

    /// All-zero weights with the given architecture.
    pub fn zeroed(arch: &ArchSpec) -> Result<Self, ProviderError> {
        build(arch, |_, _| 0.0)
    }

    pub fn stages(&self) -> &[ConvStage] {
        &self.stages
    }

    pub fn head(&self) -> &ProjectionHead {
        &self.head
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn embed_dim(&self) -> usize {
        self.head.dim
    }

    /// Channels of the trunk output, i.e. the input of the region tail.
    pub fn trunk_channels(&self) -> usize {
        self.stages[self.split - 1].out_channels
    }

    pub fn param_count(&self) -> u64 {
        self.stages.iter().map(ConvStage::param_count).sum::<u64>() + self.head.param_count()
    }

    /// FNV-1a over the little-endian bytes of every weight, stage by stage
    /// (weights then bias), head last.
    pub fn weight_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let arrays = self
            .stages
            .iter()
            .flat_map(|s| [s.weights.as_slice(), s.bias.as_slice()])
            .chain([self.head.weights.as_slice(), self.head.bias.as_slice()]);
        for arr in arrays {
            for v in arr {
                for b in v.to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    fn run(&self, range: core::ops::Range<usize>, x: &FeatureMap) -> Result<FeatureMap, ProviderError> {
        let mut cur: Option<FeatureMap> = None;
        for i in range {
            let stage = &self.stages[i];
            let input = cur.as_ref().unwrap_or(x);
            if input.channels() != stage.in_channels {
                return Err(ProviderError::ChannelMismatch {
                    stage: i,
                    expected: stage.in_channels,
                    actual: input.channels(),
                });
            }
            cur = Some(stage.forward(input)?);
        }
        Ok(cur.unwrap_or_else(|| x.clone()))
    }

    /// Trunk stages over a whole image or map.
    pub fn encode_full(&self, img: &FeatureMap) -> Result<FeatureMap, ProviderError> {
        self.run(0..self.split, img)
    }

    /// Every stage over a whole image or map, as a dense detector would.
    pub fn encode_dense(&self, img: &FeatureMap) -> Result<FeatureMap, ProviderError> {
        self.run(0..self.stages.len(), img)
    }

    /// Tail stages and projection over a pooled region.
    pub fn encode_head(&self, pooled: &FeatureMap) -> Result<Embedding, ProviderError> {
        let x = self.run(self.split..self.stages.len(), pooled)?;
        self.head.forward(&x)
    }

    /// All stages and projection over a crop resized to the input size.
    pub fn encode_crop(&self, crop: &Image) -> Result<Embedding, ProviderError> {
        let m = crop.as_map();
        if m.channels() != self.input_channels || m.height() != self.input_size || m.width() != self.input_size {
            return Err(ProviderError::InputSize {
                expected: self.input_size,
                channels: self.input_channels,
                got_channels: m.channels(),
                got_h: m.height(),
                got_w: m.width(),
            });
        }
        let x = self.run(0..self.stages.len(), m)?;
        self.head.forward(&x)
    }
}

/// Stub backbone with weights drawn from SplitMix64 seeded by `seed`.
///
/// Arrays are filled in order: for each stage its weights then its bias,
/// then the head weights and bias. Weights are uniform in
/// `[-sqrt(6 / fan_in), sqrt(6 / fan_in))`, biases uniform in
/// `[-0.05, 0.05)`.
pub fn make_stub(seed: u64, arch: &ArchSpec) -> Result<StagedBackbone, ProviderError> {
    let mut rng = Prng::new(seed);
    build(arch, |fan_in, is_bias| {
        if is_bias {
            rng.symmetric_f32(0.05)
        } else {
            rng.symmetric_f32(libm::sqrtf(6.0 / fan_in as f32))
        }
    })
}

fn build(arch: &ArchSpec, mut draw: impl FnMut(usize, bool) -> f32) -> Result<StagedBackbone, ProviderError> {
    arch.validate()?;
    let mut stages = Vec::with_capacity(arch.stages.len());
    let mut c = arch.input_channels;
    for spec in &arch.stages {
        let fan_in = c * spec.kernel * spec.kernel;
        let weights = (0..spec.out_channels * fan_in).map(|_| draw(fan_in, false)).collect();
        let bias = (0..spec.out_channels).map(|_| draw(fan_in, true)).collect();
        stages.push(ConvStage::new(c, *spec, weights, bias)?);
        c = spec.out_channels;
    }
    let weights = (0..arch.embed_dim * c).map(|_| draw(c, false)).collect();
    let bias = (0..arch.embed_dim).map(|_| draw(c, true)).collect();
    let head = ProjectionHead::new(c, arch.embed_dim, weights, bias)?;
    StagedBackbone::from_parts(arch.input_channels, arch.input_size, stages, arch.split_index(), head)
}

/// Anything that can play the classifier backbone in a pipeline.
pub trait RegionEncoder: Sync {
    /// Trunk encoding of the whole image.
    fn encode_full(&self, image_id: ImageId, img: &Image) -> Result<Cow<'_, FeatureMap>, ProviderError>;
    fn encode_head(&self, pooled: &FeatureMap) -> Result<Embedding, ProviderError>;
    fn encode_crop(&self, crop: &Image) -> Result<Embedding, ProviderError>;
    fn input_size(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn param_count(&self) -> u64;
}

impl RegionEncoder for StagedBackbone {
    fn encode_full(&self, _image_id: ImageId, img: &Image) -> Result<Cow<'_, FeatureMap>, ProviderError> {
        StagedBackbone::encode_full(self, img.as_map()).map(Cow::Owned)
    }

    fn encode_head(&self, pooled: &FeatureMap) -> Result<Embedding, ProviderError> {
        StagedBackbone::encode_head(self, pooled)
    }

    fn encode_crop(&self, crop: &Image) -> Result<Embedding, ProviderError> {
        StagedBackbone::encode_crop(self, crop)
    }

    fn input_size(&self) -> usize {
        self.input_size
    }

    fn embed_dim(&self) -> usize {
        self.head.dim
    }

    fn param_count(&self) -> u64 {
        StagedBackbone::param_count(self)
    }
}

/// Replays recorded trunk feature maps per image; region encoding runs on
/// the wrapped backbone.
#[derive(Debug, Clone)]
pub struct ReplayBackbone {
    inner: StagedBackbone,
    features: BTreeMap<ImageId, FeatureMap>,
}

impl ReplayBackbone {
    pub fn new(inner: StagedBackbone, features: BTreeMap<ImageId, FeatureMap>) -> Result<Self, ProviderError> {
        let expected = inner.trunk_channels();
        if let Some(m) = features.values().find(|m| m.channels() != expected) {
            return Err(ProviderError::ChannelMismatch {
                stage: inner.split,
                expected,
                actual: m.channels(),
            });
        }
        Ok(ReplayBackbone { inner, features })
    }

    pub fn backbone(&self) -> &StagedBackbone {
        &self.inner
    }

    pub fn features(&self) -> &BTreeMap<ImageId, FeatureMap> {
        &self.features
    }
}

impl RegionEncoder for ReplayBackbone {
    fn encode_full(&self, image_id: ImageId, _img: &Image) -> Result<Cow<'_, FeatureMap>, ProviderError> {
        self.features
            .get(&image_id)
            .map(Cow::Borrowed)
            .ok_or(ProviderError::UnknownImage(image_id))
    }

    fn encode_head(&self, pooled: &FeatureMap) -> Result<Embedding, ProviderError> {
        self.inner.encode_head(pooled)
    }

    fn encode_crop(&self, crop: &Image) -> Result<Embedding, ProviderError> {
        self.inner.encode_crop(crop)
    }

    fn input_size(&self) -> usize {
        self.inner.input_size
    }

    fn embed_dim(&self) -> usize {
        self.inner.embed_dim()
    }

    fn param_count(&self) -> u64 {
        self.inner.param_count()
    }
}

/// A candidate region with its raw objectness logit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
}

impl Proposal {
    /// Objectness squashed into (0, 1) by the logistic function.
    pub fn score(&self) -> f64 {
        math::logistic(self.objectness)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ProposalSource {
    Synthetic,
    Fixture,
}

/// Per-image proposal lists, clipped to their images and ranked.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalProvider {
    source: ProposalSource,
    per_image: BTreeMap<ImageId, Vec<Proposal>>,
}

impl ProposalProvider {
    pub fn new(
        source: ProposalSource,
        entries: impl IntoIterator<Item = (ImageId, ImageExtent, Vec<Proposal>)>,
    ) -> Result<Self, ProviderError> {
        let mut per_image = BTreeMap::new();
        for (id, extent, mut list) in entries {
            for p in list.iter_mut() {
                if !p.objectness.is_finite() {
                    return Err(ProviderError::InvalidProposal("objectness must be finite"));
                }
                p.bbox
                    .validate()
                    .map_err(|_| ProviderError::InvalidProposal("box must be finite with ordered corners"))?;
                p.bbox = clip_box(&p.bbox, extent);
            }
            list.sort_by(rank_order);
            per_image.insert(id, list);
        }
        Ok(ProposalProvider { source, per_image })
    }

    pub fn source(&self) -> ProposalSource {
        self.source
    }

    pub fn image_ids(&self) -> impl Iterator<Item = ImageId> + '_ {
        self.per_image.keys().copied()
    }

    /// All proposals of an image, ranked.
    pub fn all(&self, image_id: ImageId) -> Result<&[Proposal], ProviderError> {
        self.per_image
            .get(&image_id)
            .map(Vec::as_slice)
            .ok_or(ProviderError::UnknownImage(image_id))
    }

    /// The `k` highest-objectness proposals, best first. Ties are broken by
    /// the lexicographic order of the box corners.
    pub fn propose(&self, image_id: ImageId, k: usize) -> Result<&[Proposal], ProviderError> {
        let all = self.all(image_id)?;
        Ok(&all[..k.min(all.len())])
    }
}

fn rank_order(a: &Proposal, b: &Proposal) -> core::cmp::Ordering {
    b.objectness
        .total_cmp(&a.objectness)
        .then_with(|| a.bbox.lex_cmp(&b.bbox))
}
