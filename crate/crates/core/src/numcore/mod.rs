//! Dense `f64` tensors, a reverse-mode autodiff tape, and the UPTN on-disk
//! tensor format.

mod gemm;
mod tape;
mod tensor;
pub mod uptn;

pub use gemm::gemm;
pub use tape::{gelu, logsumexp, softmax_in_place, Binary, Gradients, Tape, Unary, Var};
pub use tensor::{numel, Tensor};

#[cfg(test)]
mod tape_tests;
