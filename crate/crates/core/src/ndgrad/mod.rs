//! Dense tensors, a reverse-mode tape and the Adam optimizer.

mod adam;
mod check;
mod sparse;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState, Moments};
pub use check::{gradient_check, GradCheck, REL_FLOOR};
pub use sparse::SparseMatrix;
pub use tape::{Tape, Var, LAYERNORM_EPS};
pub use tensor::{Scalar, Tensor};
