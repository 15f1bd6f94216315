//! Desk-scale object detection built on a small dense tensor core.
//!
//! The pipeline is a staged convolutional backbone (with deformable
//! convolution on selected stages), a feature pyramid neck (plain path
//! aggregation or densely connected), and an anchor-free decoupled head.
//! Every differentiable operator has a hand-written backward pass that is
//! checked against central finite differences.

pub mod backbone;
pub mod bbox;
pub mod config;
pub mod deform;
pub mod detect;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod head;
pub mod init;
pub mod loss;
pub mod model;
pub mod neck;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
