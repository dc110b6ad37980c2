//! Coarse-to-fine matching network at toy scale.
//!
//! A conv pyramid produces coarse (1/`r_c`) and fine (1/2) feature maps. The
//! coarse maps pass through interleaved linear self-attention and masked
//! cross-attention, then a masked dual softmax gives the coarse confidence
//! matrix. Mutual nearest neighbours above `delta_c` seed fine windows that
//! are refined to sub-pixel positions by a small transformer and a softmax
//! expectation.

mod coarse;
mod config;
mod encoder;
mod fine;
mod loss;
mod model;
mod transformer;
mod weights;

pub use coarse::{
    coarse_transform, coarse_transform_backward, dual_softmax_backward, masked_dual_softmax, select_coarse_matches,
    CoarseMatch, CoarseMatchSet, CoarseTransformCache, DualSoftmaxCache,
};
pub use config::{Fusion, LoraConfig, MatcherConfig};
pub use encoder::{EncoderCache, EncoderOutput, ToyEncoder};
pub use fine::{expectation, FineCache, FineMatch, FineMatchSet, FineModule};
pub use loss::{coarse_loss, fine_loss, CoarseLoss, FineLoss};
pub use model::{
    AttentionDump, GtPair, LossOptions, LossReport, MatchOutput, Matcher, Supervision, TrainStage,
};
pub use transformer::{AttentionKind, AttnLayer, LayerCache};
pub use weights::{
    file_digest, load_weights, save_weights, Checkpoint, LoraInfo, TensorEntry, TrainState, WeightsHeader, WEIGHTS_MAGIC,
};

use thiserror::Error;

use crate::epipolar::EpipolarError;
use crate::geometry::GeometryError;
use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum MatcherError {
    #[error("invalid config field `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Epipolar(#[from] EpipolarError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("loss is undefined: {0}")]
    EmptyLoss(String),
    #[error("coarse match ({0}, {1}) violates the epipolar mask")]
    MaskViolation(usize, usize),
    #[error("weights file: {0}")]
    Weights(String),
    #[error("config hash mismatch: weights were trained with {expected}, got {found}")]
    HashMismatch { expected: String, found: String },
    #[error(transparent)]
    File(#[from] crate::io::IoError),
}
