//! Quantization-aware training with an adaptive binary/ternary depth regularizer.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod dataio;
pub mod error;
pub mod format;
pub mod inference;
pub mod nn;
pub mod quant;
pub mod regularizer;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use autograd::{Op, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
