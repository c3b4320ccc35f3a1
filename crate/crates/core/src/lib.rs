//! Knowledge generation from narratives with latent diffusion.
//!
//! The numeric core is generic over the scalar type; models train in `f32`
//! and gradient checks run in `f64`.

pub mod cli;
pub mod corpus;
pub mod diffuser;
pub mod embedder;
pub mod entitypipe;
pub mod error;
pub mod evalmetrics;
pub mod numkernel;
pub mod rng;
pub mod scalar;
pub mod schedule;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = numkernel::Tensor<f32>;
pub type Tensor64 = numkernel::Tensor<f64>;
pub type Params32 = numkernel::ParameterStore<f32>;
pub type Params64 = numkernel::ParameterStore<f64>;
pub type Tape32<'a> = numkernel::Tape<'a, f32>;
pub type Tape64<'a> = numkernel::Tape<'a, f64>;
pub type Latent32 = schedule::LatentBlock<f32>;
pub type Latent64 = schedule::LatentBlock<f64>;
pub type Embedder32 = embedder::Embedder<f32>;
pub type Diffuser32 = diffuser::Diffuser<f32>;
