//! Nighttime video deraining with a conditional video diffusion model.
//!
//! The crate contains the whole pipeline: a small reverse-mode tensor
//! library, the noise schedule and deterministic sampler, the transformer
//! noise estimator, a procedural rain/night-scene generator, the
//! teacher-student self-training loops, quality metrics, and the
//! command-level orchestration used by the `nightrain` binary.
//!
//! Numeric code is generic over [`Scalar`]; the production type is `f32` and
//! the aliases below name the concrete instantiations.

pub mod checkpoint;
pub mod clip;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod net;
pub mod parallel;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod selftrain;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Clip32 = clip::Clip<f32>;
pub type NoiseNet32 = net::NoiseNet<f32>;
pub type NetParams32 = net::NetParams<f32>;
pub type TeacherStudent32 = selftrain::TeacherStudent<f32>;
