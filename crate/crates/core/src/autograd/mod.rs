//! Dense tensors and reverse-mode differentiation over a fixed primitive
//! catalog.

pub(crate) mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use scalar::{Dual, Scalar};
pub use tape::{Gradients, PrimKind, Tape, Var};
pub use tensor::Tensor;
