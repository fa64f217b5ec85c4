//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Parameters enter as leaves,
//! operations append nodes, and [`Tape::backward`] fills gradient slots.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use tape::{sigmoid, Activation, Tape, Var};
pub use tensor::Tensor;
