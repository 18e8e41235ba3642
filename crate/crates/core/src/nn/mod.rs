//! Minimal differentiable tensor machinery: a tape-based autodiff graph,
//! named parameters, transformer layers and the Adam optimizer.

mod adam;
mod graph;
mod layers;
mod params;

pub use adam::{Adam, AdamConfig, LrSchedule};
pub use graph::{Gradients, Graph, Mat, Var};
pub use layers::{
    scaled_masked_attention, sinusoidal_positions, LayerNorm, Linear, MultiHeadAttention, TransformerLayer,
    TransformerStack,
};
pub use params::{round_f32, ParamId, Params};

#[cfg(test)]
mod tests;
