//! Late fusion of per-pixel class-probability maps from several semantic
//! segmentation models.
//!
//! The crate provides
//!
//! - [`probmap`]: probability-map, mask and score tensors;
//! - [`fusion`]: fuzzy rank-based voting and seven classical fusion rules;
//! - [`metrics`]: pooled confusion matrices, IoU and pixel accuracy;
//! - [`io`]: tensor, mask and manifest file formats;
//! - [`compare`]: rule-vs-combination evaluation tables;
//! - [`synth`]: deterministic synthetic scenes and Gaussian pixel classifiers.

pub mod compare;
pub mod error;
pub mod fusion;
pub mod io;
pub mod metrics;
pub mod probmap;
pub mod synth;

pub use error::{Error, ErrorClass, Result};
pub use fusion::{fuse, fused_scores, FusionRule};
pub use metrics::{ConfusionMatrix, EvalReport};
pub use probmap::{
    argmax_decide, softmax, stack_models, validate_probmap, ClassSet, Decision, FusedScoreMap,
    LabelMask, ModelStack, ProbMap, Shape,
};
