//! Dense f64 tensors with a recording tape for reverse-mode gradients.
//!
//! Only the operations the ego-convolution model needs are provided. A
//! [`Tape`] is built per forward pass and consumed by [`Tape::backward`];
//! parameters live outside the tape as plain [`Tensor`]s and are registered
//! as leaves on each pass.

mod adam;
mod gemm;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gemm::gemm;
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use tape::{Activation, BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;
