//! Tensors, reverse-mode autodiff and the neural building blocks.

mod adam;
mod attention;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod init;
mod layers;
mod tensor;

pub use adam::{Adam, AdamState};
pub use attention::{multi_head_attention, MultiHeadAttention};
pub use graph::{Gradients, Graph, Var};
pub use init::{orthogonal, Init};
pub use layers::{forward_mlp, Linear, Mlp, OutputActivation};
pub use tensor::{ParamId, ParamStore, Tensor};
