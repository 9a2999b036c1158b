//! Desk-scale vision-language captioning stack.
//!
//! The pipeline: a low-light enhancement front end, region masks (ingested
//! or proposed), a shared vision transformer encoding both the whole image
//! and the mask-isolated regions, learnable fusion of the two pathways, a
//! query transformer with gated context-aware cross-attention bridging into
//! a small causal language model, trained with a weighted contrastive /
//! matching / captioning objective under low-rank adaptation. Evaluation
//! covers consensus captioning scores, retrieval recall, and mean average
//! precision.
//!
//! The numeric core is generic over the scalar type ([`scalar::Scalar`],
//! implemented for `f32` and `f64`); the concrete aliases below pin `f64`
//! as the working precision, which the gradient verification relies on.

pub mod decoder;
pub mod encoder;
pub mod enhance;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod imageio;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod qformer;
pub mod regions;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Working-precision aliases; all model and harness code runs on these.
pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tape::Tape<f64>;
pub type RgbImage = imageio::RgbImage<f64>;
pub type ParamStore = params::ParamStore<f64>;
