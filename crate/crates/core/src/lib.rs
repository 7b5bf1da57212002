//! Head-to-tail feature fusion for long-tailed classification.
//!
//! A small CPU training stack (tensors, reverse-mode tape, SGD), synthetic
//! long-tailed data, class-aware samplers, channel-level feature fusion for
//! classifier re-training, and diagnostics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod container;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sampling;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{BackboneSpec, ModelState};
pub use tensor::Tensor;
