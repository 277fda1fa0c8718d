//! Dense tensors, reverse-mode differentiation and the AdamW optimizer.

pub mod msmt;
mod optim;
mod tape;
mod tensor;

pub use optim::{AdamW, AdamWConfig};
pub use tape::{BinaryOp, Gradients, Tape, UnaryOp, Var};
pub use tensor::{Real, Tensor};
