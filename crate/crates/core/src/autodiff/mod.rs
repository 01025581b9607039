//! Reverse-mode automatic differentiation over dense `f64` tensors.

pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{sigmoid, Binary, Reduction, Tape, Unary, Var};
pub use tensor::Tensor;
