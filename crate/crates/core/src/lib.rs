//! Gated appearance-flow virtual try-on.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`autodiff`]),
//! differentiable warping ([`warp`]), multi-scale flow aggregation ([`gaf`]),
//! Skip-UNet backbones ([`nets`]), the training objectives ([`losses`]), the
//! three-stage pipeline with its training schedule ([`pipeline`]) and a
//! procedural data generator with exact ground truth ([`synthdata`]).

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gaf;
pub mod gradcheck;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod sample;
pub mod synthdata;
pub mod tensor;
pub mod warp;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
