//! Graph-matching self-supervision with gradients through a combinatorial
//! solver, and post-hoc uncertainty estimation for frozen segmenters.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod affinity;
pub mod bench;
pub mod blackbox;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod fsutil;
pub mod graph;
pub mod matcher;
pub mod math;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod uncertainty;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::Tensor;
