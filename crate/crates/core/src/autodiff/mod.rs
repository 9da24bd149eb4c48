//! Dense tensors, a reverse-mode tape, named parameters and Adam.

mod adam;
pub mod gradcheck;
pub mod linalg;
mod param;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use param::{hex_sha256, ParamStore, Parameter};
pub use tape::{CustomOp, Gradients, Tape, Var, PAD_INDEX};
pub use tensor::{argmax, Real, Tensor};
