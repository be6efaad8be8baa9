//! Tensor values, a reverse-mode tape, and the convolution kernels behind it.

pub mod conv;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::Adam;
pub use params::{ParamId, ParamStore};
pub use tape::{reflect_index, Conv1dSpec, Conv2dSpec, CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("backward called on a value that was not recorded")]
    NotRecorded,
}
