//! Dense tensors, reverse-mode differentiation and the layers built on them.

pub mod checkpoint;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use layers::{GruCell, LayerNorm, Linear, Mlp, MultiHeadAttention};
pub use params::{Grads, ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
