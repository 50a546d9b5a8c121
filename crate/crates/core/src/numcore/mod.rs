//! Dense tensors, tape-based reverse-mode autodiff, Adam and gradient
//! clipping, and the binary checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
mod optim;
mod param;
mod tape;
mod tensor;

pub use optim::{clip_global_norm, global_norm, Adam};
pub use param::{init_uniform, Gradients, ParamId, ParamStore, Parameter};
pub use tape::{backward, Tape, Var};
pub use tensor::Tensor;
