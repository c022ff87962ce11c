//! Radar–camera fusion dense prediction transformer at desk scale.
//!
//! * [`tensor`]: dense tensors, tape-based reverse-mode autodiff, SGD, RTEN files.
//! * [`vit`]: patch embedding and transformer encoder with tap layers.
//! * [`fusion`]: reassemble stages, including the radar-fused read projection.
//! * [`decoder`]: fusion blocks and the depth head.
//! * [`model`]: the four fusion topologies and checkpoints.
//! * [`loss`] / [`metrics`]: training objective and evaluation suite.
//! * [`data`]: synthetic multi-sensor scenes and dataset IO.
//! * [`harness`]: training, evaluation, comparison and gradient-check drivers.

pub mod data;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod kv;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use fusion::FusionMode;
pub use model::{DepthModel, ModelConfig};
pub use tensor::{Element, Tape, Tensor, Var};

/// Maximum evaluated depth in metres.
pub const DEPTH_CAP: f64 = 80.0;
