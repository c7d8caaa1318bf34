//! Dense `f64` tensors with define-by-run reverse-mode differentiation.

mod ops;
mod tape;
mod tensor;

pub mod gradcheck;

pub use ops::{concat_cols, sigmoid, softmax_rows_raw, Activation};
pub use tape::{BackwardFn, Gradients, Tape, Var};
pub use tensor::Tensor;

#[allow(unused_imports)]
pub(crate) use tensor::{gemm, gemm_nt, gemm_tn};
