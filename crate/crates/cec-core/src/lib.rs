//! Clustered-patch element connection layers for few-shot classification,
//! with a self-contained episodic harness on synthetic imagery.
//!
//! The crate provides, bottom to top:
//!
//! * [`tensor`] — dense tensors with reverse-mode automatic differentiation,
//!   generic over the scalar type (f64 default, f32 switchable at runtime);
//! * [`cluster`] — the patch-cluster operator in four modes (matmul, cosine,
//!   meta graph convolution, transformer) plus a cross-attention baseline;
//! * [`connect`] — relation maps, element connection, and the combined
//!   connection layer;
//! * [`blocks`] — the derived modules: bidirectional and self connection,
//!   the connection-based distance metric, embedding bank, classifier head;
//! * [`loss`] — patch-wise metric classifier, patch-wise cross-entropy,
//!   auxiliary global/rotation heads, and the uncertainty-weighted
//!   multi-task objective;
//! * [`synth`] / [`encoder`] — a controllable synthetic image generator and
//!   a small convolutional embedding;
//! * [`episode`] / [`harness`] — episodic sampling, base training, novel
//!   fine-tuning, and inference combining metric and fine-tune predictions;
//! * [`config`] / [`checkpoint`] — run configuration and a binary
//!   checkpoint container for exact training continuation.

pub mod blocks;
pub mod checkpoint;
pub mod cluster;
pub mod config;
pub mod connect;
pub mod encoder;
pub mod episode;
pub mod error;
pub mod export;
pub mod harness;
pub mod loss;
pub mod scalar;
pub mod synth;
pub mod tensor;

pub use error::{CecError, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Concrete aliases for the two supported precisions.
pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type FeatureMap64 = connect::FeatureMap<f64>;
pub type FeatureMap32 = connect::FeatureMap<f32>;
pub type RelationMap64 = connect::RelationMap<f64>;
pub type RelationMap32 = connect::RelationMap<f32>;

/// Default epsilon guarding normalization denominators.
pub const NORM_EPS: f64 = 1e-12;
