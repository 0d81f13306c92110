//! Minimal dense-tensor reverse-mode autodiff engine.

pub mod check;
pub mod tape;
pub mod tensor;

pub use check::{finite_diff_check, finite_diff_error, DEFAULT_STEP};
pub use tape::{Gradients, Op, Tape, Var, NORM_EPS};
pub use tensor::Tensor;
