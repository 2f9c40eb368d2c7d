//! SwinFi: a Swin-Transformer autoencoder that compresses Wi-Fi CSI frames
//! into small feature images at the edge and reconstructs them in the cloud.
//!
//! * [`tensor`]: dense tensors, reverse-mode autodiff, Adam.
//! * [`csiprep`]: capture container, amplitude/phase sanitisation, framing.
//! * [`model`]: encoder, decoder, classifier head, losses, γ and complexity.
//! * [`syndata`]: deterministic synthetic captures.
//! * [`pipeline`]: training, checkpoints, feature-image wire format, streams.
//!
//! The numeric core is generic over [`Scalar`]; the aliases below fix it to
//! `f32` for training and inference and `f64` for gradient checks.

pub mod csiprep;
pub mod model;
pub mod pipeline;
pub mod scalar;
pub mod syndata;
pub mod tensor;

pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Graph64 = tensor::Graph<f64>;
