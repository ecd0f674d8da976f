//! Diffusion-based behavior cloning at desk scale.

pub mod checkpoint;
pub mod dataset;
pub mod denoiser;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod policies;
pub mod report;
pub mod rng;
pub mod schedule;
pub mod sim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Adam, Gradients, Graph, ParamId, ParamSet, Scope, Tensor, Var};
