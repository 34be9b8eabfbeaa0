//! Entropy-based semantic feature alignment for occlusion-robust person
//! re-identification.
//!
//! A small convolutional backbone predicts a per-pixel body-part
//! distribution alongside a reduced feature map. Pixel entropy of that
//! distribution splits features into confident per-part descriptors and an
//! unconfident pseudo-region; people are compared only over the parts both
//! images show, weighted by visibility.
//!
//! Module map:
//! - [`segmap`]: entropy, confidence and unconfident masks
//! - [`align`]: descriptors and aligned / extended distances
//! - [`losses`]: ID, batch-hard triplet, parsing and total losses
//! - [`model`]: backbone with parsing and reduction heads, checkpoints
//! - [`synthdata`]: procedural partial-person benchmark
//! - [`eval`]: CMC, mAP and PR-AUC
//! - [`train`], [`experiment`]: training loop, ablations, sweeps, visualisation

pub mod align;
pub mod autodiff;
pub mod config;
pub mod descfile;
mod error;
pub mod eval;
pub mod experiment;
mod io;
pub mod losses;
pub mod model;
pub mod segmap;
pub mod synthdata;
pub mod tensor;
pub mod train;
pub mod viz;

pub use align::{
    aligned_distance, build_descriptor, extended_distance, pairwise_extended_distances,
    DistanceConfig, DistanceKind, FeatureKind, FeatureMap, PersonDescriptor, UnconfidentSource,
};
pub use error::{Error, Result};
pub use eval::{MetricReport, ScoreMatrix};
pub use losses::LossWeights;
pub use model::{Model, ModelConfig, ModelOutput};
pub use segmap::{ConfidenceMap, EntropyMap, SemanticProbMap, UnconfidentMask};
pub use tensor::Matrix;
