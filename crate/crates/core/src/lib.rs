//! Joint video-depth latent diffusion at desk scale.

// Parameter guards are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod cli;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod haop;
pub mod imageio;
pub mod inspect;
pub mod losses;
pub mod sampler;
pub mod schedule;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod trend;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
