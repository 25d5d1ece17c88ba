//! Diffusion watermarking laboratory: models, key embedding, surrogate
//! detectors and attacks.

pub mod analysis;
pub mod attacks;
pub mod checkpoint;
pub mod codec;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod quality;
pub mod spectrum;
pub mod surrogate;
pub mod tensor;
pub mod watermark;

pub use error::{Error, Result};
