//! Reverse-mode differentiation over small dense `f64` tensors.

mod check;
pub mod suite;
mod tape;
mod tensor;

pub use check::{grad_check, GradCheck};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
