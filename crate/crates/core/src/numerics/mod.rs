//! Dense tensors and the reverse-mode tape that differentiates the model.

mod scalar;
mod tape;
mod tensor;

pub use scalar::Scalar;
pub use tape::{permute_tensor, Gradients, Tape, Var};
pub use tensor::Tensor;
