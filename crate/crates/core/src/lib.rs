//! Hybrid attention encoder-decoder for binary lesion segmentation.
//!
//! The crate carries its own reverse-mode autodiff engine ([`autograd`]),
//! a DenseNet-style encoder ([`nn`]), the bottleneck attention module
//! ([`tam`]), the skip-connection enhancement block ([`sfeb`]), the full
//! network ([`model`]), losses and metrics, the training loop, dataset
//! I/O, and the Friedman/Nemenyi rank tests used to compare methods.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod sfeb;
pub mod stats;
pub mod tam;
pub mod tensor;
pub mod trainer;

pub use autograd::{Activation, Reduce, Tape, Var};
pub use error::{Error, Result};
pub use params::{Ctx, Gradients, Mode, Module, ParamId, ParamStore};
pub use tensor::Tensor;
