//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Every backward rule is itself recorded on the tape, which gives
//! second-order derivatives such as `∇_θ ‖∇_w ℓ‖²` without a separate
//! forward-over-reverse mode.

mod check;
mod tape;
mod tensor;

pub use check::{finite_diff_check, numeric_grad};
pub use tape::{forward, Checkpoint, Grad, Tape, Var};
pub use tensor::Tensor;

#[allow(unused_imports)]
pub(crate) use tape::sigmoid;
#[allow(unused_imports)]
pub(crate) use tensor::matmul;
