//! Multiscale feature fusion for a toy single-stage detector: a bottom-up
//! pyramid, a bidirectional ConvLSTM semantic-combining stage, SE-style
//! channel attention for redistribution, the ablation comparator fusions,
//! and the detection metrology (matching, losses, NMS, mAP) — all built on
//! a minimal reverse-mode tape.
//!
//! Every numeric component is generic over the scalar type: train at `f32`,
//! gradient-check at `f64`.

pub mod arnet;
pub mod backbone;
pub mod detector;
pub mod error;
pub mod fusion;
pub mod nn;
pub mod scalar;
pub mod scnet;
pub mod tape;
pub mod tensor;

pub use arnet::{ArNet, CombineMode, SeBlock};
pub use backbone::{Backbone, LevelLayout, PyramidFeatures, PyramidSpec};
pub use error::{Error, Result};
pub use fusion::{FusionConfig, FusionKind, FusionNetwork};
pub use nn::{default_schedule, init_tensor, Bound, Init, ParamStore, Sgd, SgdConfig};
pub use scalar::Scalar;
pub use scnet::{ConvLstmCell, LstmState, MatchingBlock, ScNet};
pub use tape::{GradientMap, Tape};
pub use tensor::{NodeId, Tensor};

/// Training-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Gradient-check-precision tensor.
pub type Tensor64 = Tensor<f64>;
/// Training-precision tape.
pub type Tape32 = Tape<f32>;
/// Gradient-check-precision tape.
pub type Tape64 = Tape<f64>;
