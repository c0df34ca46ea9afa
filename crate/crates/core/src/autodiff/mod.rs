//! Reverse-mode differentiation over dense `f64` tensors.

mod kernels;
mod tape;
mod tensor;

pub mod checkpoint;

pub use tape::{Gradients, Tape, Var, LOG_CLAMP};
pub use tensor::{NamedParam, ParamId, ParamStore, Tensor};
