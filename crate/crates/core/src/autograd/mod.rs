//! Small reverse-mode differentiation engine over a fixed set of dense `f64` ops,
//! with the Adam optimizer and a finite-difference gradient checker.

mod adam;
mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::check_gradients;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
