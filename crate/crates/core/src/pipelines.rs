//! The three pipeline families assembled from providers, the class head and
//! post-processing.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use thiserror::Error;

use crate::classify::{argmax, class_scores, ensemble_all, ClassifyConfig, ClassifyError, Embedding, EmbeddingBank};
use crate::geometry::{clip_box, expand_box};
use crate::postprocess::{fuse_scores, per_class_nms, Detection, NmsConfig, PostprocessError};
use crate::providers::{Proposal, ProposalProvider, ProviderError, RegionEncoder, StagedBackbone};
use crate::roialign::{roi_align, RoiAlignConfig, RoiAlignError};
use crate::tensor::Image;
use crate::ImageId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(&'static str),
    #[error("unknown variant {0:?} (expected vanilla, drr or crr)")]
    UnknownVariant(alloc::string::String),
    #[error("bank dimension {bank} does not match backbone embedding dimension {backbone}")]
    EmbedDim { bank: usize, backbone: usize },
    #[error("classifier input size {config} does not match backbone input size {backbone}")]
    InputSize { config: usize, backbone: usize },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Postprocess(#[from] PostprocessError),
    #[error(transparent)]
    RoiAlign(#[from] RoiAlignError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Variant {
    /// Crop, resize and encode every proposal.
    Vanilla,
    /// Separate detector and classifier backbones, RoIAlign on the classifier trunk.
    Drr,
    /// One backbone shared by the proposal and classification paths.
    Crr,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Vanilla, Variant::Drr, Variant::Crr];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::Drr => "drr",
            Variant::Crr => "crr",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vanilla" => Ok(Variant::Vanilla),
            "drr" => Ok(Variant::Drr),
            "crr" => Ok(Variant::Crr),
            other => Err(PipelineError::UnknownVariant(other.into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PipelineConfig {
    pub variant: Variant,
    /// Proposals kept per image.
    pub proposals: usize,
    /// Multiply in the squashed objectness as `sqrt(s1 * s2)`.
    pub fusion: bool,
    /// Average 1x and expanded crop embeddings (vanilla only).
    pub crop_ensemble: bool,
    pub classifier_input_size: usize,
    pub roi_align: RoiAlignConfig,
    pub nms: NmsConfig,
    pub classify: ClassifyConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            variant: Variant::Drr,
            proposals: 100,
            fusion: true,
            crop_ensemble: true,
            classifier_input_size: 224,
            roi_align: RoiAlignConfig::default(),
            nms: NmsConfig::default(),
            classify: ClassifyConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.proposals == 0 {
            return Err(PipelineError::Config("proposal count must be at least 1"));
        }
        if self.classifier_input_size == 0 {
            return Err(PipelineError::Config("classifier input size must be positive"));
        }
        if self.roi_align.output_size == 0 || self.roi_align.sampling_ratio == 0 {
            return Err(PipelineError::Config("RoIAlign output size and sampling ratio must be positive"));
        }
        self.nms.validate()?;
        self.classify.validate()?;
        Ok(())
    }
}

/// Pipeline stages reported by the timing breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Stage {
    Propose,
    Encode,
    Classify,
    Postprocess,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Propose, Stage::Encode, Stage::Classify, Stage::Postprocess];
}

/// Encoder invocations worth counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    /// Dense detector pass feeding the proposal path.
    DetectorPass,
    /// Classifier trunk over the whole image.
    FullEncode,
    /// Classifier tail over one pooled region.
    HeadEncode,
    /// Full classifier stack over one resized crop.
    CropEncode,
}

/// Hooks for timing and counting; every method defaults to a no-op.
pub trait Instrument {
    fn begin(&mut self, _stage: Stage) {}
    fn end(&mut self, _stage: Stage) {}
    fn count(&mut self, _event: Event) {}
}

impl Instrument for () {}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Counters {
    pub detector_passes: u64,
    pub full_encodes: u64,
    pub head_encodes: u64,
    pub crop_encodes: u64,
}

impl Instrument for Counters {
    fn count(&mut self, event: Event) {
        match event {
            Event::DetectorPass => self.detector_passes += 1,
            Event::FullEncode => self.full_encodes += 1,
            Event::HeadEncode => self.head_encodes += 1,
            Event::CropEncode => self.crop_encodes += 1,
        }
    }
}

fn timed<T, I: Instrument + ?Sized>(inst: &mut I, stage: Stage, f: impl FnOnce(&mut I) -> T) -> T {
    inst.begin(stage);
    let out = f(inst);
    inst.end(stage);
    out
}

/// Score one region embedding and turn it into a detection at its best
/// foreground class.
fn score_region(
    image_id: ImageId,
    proposal: &Proposal,
    bbox: crate::BBox,
    region: &Embedding,
    bank: &EmbeddingBank,
    cfg: &PipelineConfig,
) -> Result<Option<Detection>, PipelineError> {
    let scores = class_scores(region, bank, &cfg.classify)?;
    let fused = fuse_scores(proposal.score(), &scores.probs, cfg.fusion)?;
    Ok(argmax(&fused).map(|(i, score)| Detection {
        image_id,
        class_id: bank.class_ids()[i],
        bbox,
        score,
    }))
}

/// Crop-and-classify: each proposal is cropped at every configured scale,
/// resized to the classifier input and encoded from pixels.
pub fn run_vanilla<I: Instrument + ?Sized>(
    image_id: ImageId,
    img: &Image,
    backbone: &dyn RegionEncoder,
    proposals: &[Proposal],
    bank: &EmbeddingBank,
    cfg: &PipelineConfig,
    inst: &mut I,
) -> Result<Vec<Detection>, PipelineError> {
    let extent = img.extent();
    let size = cfg.classifier_input_size;
    let factors = if cfg.crop_ensemble {
        &cfg.classify.crop_factors[..]
    } else {
        &cfg.classify.crop_factors[..1]
    };
    let mut dets = Vec::new();
    for p in proposals.iter().take(cfg.proposals) {
        let base = clip_box(&p.bbox, extent);
        let mut embeddings = Vec::with_capacity(factors.len());
        for (i, &factor) in factors.iter().enumerate() {
            let crop = expand_box(&base, factor, extent)
                .ok()
                .and_then(|b| img.crop(&b).ok());
            let Some(crop) = crop else {
                if i == 0 {
                    break;
                }
                continue;
            };
            let e = timed(inst, Stage::Encode, |inst| {
                let resized = crop.resize_bilinear(size, size)?;
                inst.count(Event::CropEncode);
                Ok::<_, PipelineError>(backbone.encode_crop(&resized)?)
            })?;
            embeddings.push(e);
        }
        if embeddings.is_empty() {
            // The 1x crop itself is degenerate: drop the proposal.
            continue;
        }
        let det = timed(inst, Stage::Classify, |_| {
            let region = ensemble_all(&embeddings)?;
            score_region(image_id, p, base, &region, bank, cfg)
        })?;
        dets.extend(det);
    }
    Ok(timed(inst, Stage::Postprocess, |_| per_class_nms(&dets, &cfg.nms)))
}

/// RoIAlign pipeline: one trunk pass over the image, then per proposal a
/// pooled region through the backbone tail.
fn run_pooled<I: Instrument + ?Sized>(
    image_id: ImageId,
    img: &Image,
    backbone: &dyn RegionEncoder,
    proposals: &[Proposal],
    bank: &EmbeddingBank,
    cfg: &PipelineConfig,
    inst: &mut I,
) -> Result<Vec<Detection>, PipelineError> {
    let extent = img.extent();
    let proposals: Vec<&Proposal> = proposals.iter().take(cfg.proposals).collect();
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let features = timed(inst, Stage::Encode, |inst| {
        inst.count(Event::FullEncode);
        backbone.encode_full(image_id, img)
    })?;
    let mut dets = Vec::new();
    for p in proposals {
        let roi = clip_box(&p.bbox, extent);
        let region = timed(inst, Stage::Encode, |inst| {
            match roi_align(&features, &roi, &cfg.roi_align) {
                Ok(pooled) => {
                    inst.count(Event::HeadEncode);
                    backbone.encode_head(&pooled).map(Some).map_err(PipelineError::from)
                }
                Err(RoiAlignError::DegenerateRoi) => Ok(None),
                Err(e) => Err(e.into()),
            }
        })?;
        let Some(region) = region else { continue };
        let det = timed(inst, Stage::Classify, |_| score_region(image_id, p, roi, &region, bank, cfg))?;
        dets.extend(det);
    }
    Ok(timed(inst, Stage::Postprocess, |_| per_class_nms(&dets, &cfg.nms)))
}

/// Decoupled pipeline: proposals come from a separate detector; `backbone`
/// is the classifier.
pub fn run_drr<I: Instrument + ?Sized>(
    image_id: ImageId,
    img: &Image,
    backbone: &dyn RegionEncoder,
    proposals: &[Proposal],
    bank: &EmbeddingBank,
    cfg: &PipelineConfig,
    inst: &mut I,
) -> Result<Vec<Detection>, PipelineError> {
    run_pooled(image_id, img, backbone, proposals, bank, cfg, inst)
}

/// Coupled pipeline: `shared` serves both the proposal path and the
/// classifier, so the per-region computation is that of [`run_drr`] on the
/// shared weights.
pub fn run_crr<I: Instrument + ?Sized>(
    image_id: ImageId,
    img: &Image,
    shared: &dyn RegionEncoder,
    proposals: &[Proposal],
    bank: &EmbeddingBank,
    cfg: &PipelineConfig,
    inst: &mut I,
) -> Result<Vec<Detection>, PipelineError> {
    run_pooled(image_id, img, shared, proposals, bank, cfg, inst)
}

/// A configured pipeline over immutable providers.
///
/// `detector` is the backbone of the separate localizer used by vanilla and
/// drr. Its trunk runs once per image in the propose stage; the proposals
/// themselves are replayed from `proposals`. crr never runs it.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    config: &'a PipelineConfig,
    classifier: &'a dyn RegionEncoder,
    detector: Option<&'a StagedBackbone>,
    proposals: &'a ProposalProvider,
    bank: &'a EmbeddingBank,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        config: &'a PipelineConfig,
        classifier: &'a dyn RegionEncoder,
        detector: Option<&'a StagedBackbone>,
        proposals: &'a ProposalProvider,
        bank: &'a EmbeddingBank,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        if bank.dim() != classifier.embed_dim() {
            return Err(PipelineError::EmbedDim {
                bank: bank.dim(),
                backbone: classifier.embed_dim(),
            });
        }
        if config.variant == Variant::Vanilla && config.classifier_input_size != classifier.input_size() {
            return Err(PipelineError::InputSize {
                config: config.classifier_input_size,
                backbone: classifier.input_size(),
            });
        }
        Ok(Pipeline {
            config,
            classifier,
            detector,
            proposals,
            bank,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Parameters of every backbone the variant holds; the shared backbone
    /// of crr counts once.
    pub fn param_count(&self) -> u64 {
        let classifier = self.classifier.param_count();
        match self.config.variant {
            Variant::Crr => classifier,
            Variant::Vanilla | Variant::Drr => classifier + self.detector.map_or(0, StagedBackbone::param_count),
        }
    }

    pub fn detect<I: Instrument + ?Sized>(
        &self,
        image_id: ImageId,
        img: &Image,
        inst: &mut I,
    ) -> Result<Vec<Detection>, PipelineError> {
        let cfg = self.config;
        let proposals = timed(inst, Stage::Propose, |inst| {
            if cfg.variant != Variant::Crr {
                if let Some(det) = self.detector {
                    inst.count(Event::DetectorPass);
                    det.encode_dense(img.as_map())?;
                }
            }
            self.proposals.propose(image_id, cfg.proposals)
        })?;
        let (bk, bank) = (self.classifier, self.bank);
        match cfg.variant {
            Variant::Vanilla => run_vanilla(image_id, img, bk, proposals, bank, cfg, inst),
            Variant::Drr => run_drr(image_id, img, bk, proposals, bank, cfg, inst),
            Variant::Crr => run_crr(image_id, img, bk, proposals, bank, cfg, inst),
        }
    }
}
