//! Dense numerical core with reverse-mode differentiation.

pub mod gradcheck;
mod layers;
mod params;
mod rng;
mod scalar;
mod tape;
mod tensor;

pub use layers::{learned_rows, AttentionOutput, Embedding, LayerNorm, Linear, MultiHeadAttention, TransformerBlock};
pub use params::{Adam, ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS, PROB_FLOOR};
pub use tensor::Tensor;
