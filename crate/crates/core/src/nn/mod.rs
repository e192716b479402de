//! Neural building blocks: linear layers, attention, the cross-attention
//! pooler, brain projectors, the toy causal decoder and the soft prompt.

mod attention;
mod decoder;
mod layers;
mod pooler;
mod projector;
mod prompt;

pub use attention::{Block, MultiHeadAttention};
pub use decoder::{argmax_index, DecoderConfig, ToyCausalDecoder};
pub use layers::{LayerNorm, Linear};
pub use pooler::{AuxEncoder, CrossAttentionPooler};
pub use projector::ProjectorEncoder;
pub use prompt::{SoftPrompt, INSTRUCTION};

use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// Forward-pass context: the graph being recorded and the parameters to bind.
#[derive(Clone, Copy)]
pub struct Ctx<'g, T: Scalar> {
    pub graph: &'g Graph<T>,
    pub params: &'g ParamSet<T>,
}

impl<'g, T: Scalar> Ctx<'g, T> {
    pub fn new(graph: &'g Graph<T>, params: &'g ParamSet<T>) -> Self {
        Self { graph, params }
    }

    pub fn p(&self, id: ParamId) -> Tensor<'g, T> {
        self.graph.param(self.params, id)
    }
}

#[cfg(test)]
mod tests;
