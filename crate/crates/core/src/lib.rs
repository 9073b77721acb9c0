//! Open-vocabulary detection engine.
//!
//! Three pipeline families share one set of primitives:
//!
//! * **vanilla**: crop every proposal out of the image (at 1× and 1.5×),
//!   resize it and encode it with the vision-language backbone;
//! * **drr**: encode the whole image once with the vision-language backbone,
//!   RoIAlign-pool each proposal from the intermediate map and run only the
//!   last stage per region, while proposals come from a separate detector;
//! * **crr**: as drr, but the detector and the classifier share one backbone.
//!
//! Region embeddings are classified against a bank of prompt-averaged text
//! embeddings, fused with the proposal objectness and filtered with per-class
//! NMS. The [`eval`] module scores detections with AP50 over base/novel
//! category splits.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, timing and the
//! command line live in the companion `ovd` crate.

#![no_std]
#![forbid(unsafe_code)]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod classify;
pub mod distill;
pub mod eval;
pub mod geometry;
pub mod pipelines;
pub mod postprocess;
pub mod providers;
pub mod rng;
pub mod roialign;
pub mod tensor;

mod math;

pub use classify::{ClassScores, ClassifyConfig, Embedding, EmbeddingBank};
pub use geometry::{BBox, ImageExtent};
pub use postprocess::{Detection, NmsConfig};
pub use providers::{Proposal, ProposalProvider, StagedBackbone};
pub use tensor::{FeatureMap, Image};

/// Identifier of an image within a dataset or fixture bundle.
pub type ImageId = u64;

/// Identifier of a category (COCO `category_id`).
pub type ClassId = u64;
