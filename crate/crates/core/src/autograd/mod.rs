//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor) values.

pub mod interp;
pub(crate) mod kernels;
mod tape;

pub use tape::{Activation, Reduce, RunningStats, Tape, Var, BN_EPS, BN_MOMENTUM};
#[allow(unused_imports)]
pub(crate) use tape::sigmoid;
