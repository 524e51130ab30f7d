//! Toy-scale guided diffusion with segmentation-free guidance.
//!
//! The crate bundles a small causal text encoder, a transformer score network
//! with a cross-attention override hook, a log-SNR sampler that switches from
//! classifier-free to segmentation-free guidance, a synthetic scene world for
//! training, and the Fréchet-distance tooling used to pick evaluation prompt
//! subsets. Numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the element type for everyday use.

pub mod backprop;
pub mod checkpoint;
pub mod cli;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod linalg;
pub mod pgm;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod tensor;
pub mod text;
pub mod train;
pub mod world;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;

pub type TensorF64 = tensor::Tensor<f64>;
pub type TensorF32 = tensor::Tensor<f32>;
pub type DenoiserF64 = denoiser::Denoiser<f64>;
pub type DenoiserF32 = denoiser::Denoiser<f32>;
pub type ScheduleF64 = schedule::NoiseSchedule<f64>;
pub type ScheduleF32 = schedule::NoiseSchedule<f32>;
pub type EmbeddingsF64 = text::TextEmbeddings<f64>;
pub type EncoderF64 = text::EncoderParams<f64>;
pub type SceneF64 = world::ToyScene<f64>;
pub type EmbeddingSetF64 = eval::EmbeddingSet<f64>;
