//! Minimal reverse-mode differentiation and the optimizer used for training.

mod graph;
mod optim;
mod tensor;

pub use graph::{Grads, Graph, RowMix, Var};
pub use optim::{AdamW, AdamWConfig};
pub use tensor::Tensor;
