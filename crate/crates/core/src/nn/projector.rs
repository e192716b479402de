use rand::Rng;

use super::{Block, Ctx, LayerNorm, Linear};
use crate::error::{Error, Result};
use crate::params::{normal, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Brain projector: the brain vector is cut into a grid of `grid` tokens,
/// embedded, run through bidirectional transformer blocks and mapped to one
/// `[grid, d]` embedding sequence.
#[derive(Debug, Clone)]
pub struct ProjectorEncoder {
    pub input: Linear,
    pub positions: ParamId,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
    pub output: Linear,
    pub brain_dim: usize,
    pub grid: usize,
    pub dim: usize,
}

impl ProjectorEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        rng: &mut impl Rng,
        name: &str,
        brain_dim: usize,
        grid: usize,
        dim: usize,
        heads: usize,
        layers: usize,
        ffn_mult: usize,
    ) -> Self {
        assert!(
            grid > 0 && brain_dim % grid == 0,
            "brain dim {brain_dim} does not split into {grid} tokens"
        );
        let token_dim = brain_dim / grid;
        Self {
            input: Linear::new(ps, rng, &format!("{name}.input"), token_dim, dim, true),
            positions: ps.add(format!("{name}.positions"), normal(rng, &[grid, dim], 0.1)),
            blocks: (0..layers)
                .map(|i| Block::new(ps, rng, &format!("{name}.block{i}"), dim, heads, ffn_mult))
                .collect(),
            ln_final: LayerNorm::new(ps, &format!("{name}.ln_final"), dim),
            output: Linear::new(ps, rng, &format!("{name}.output"), dim, dim, true),
            brain_dim,
            grid,
            dim,
        }
    }

    /// Maps `b: [d_brain]` to `[grid, d]`.
    pub fn project<'g, T: Scalar>(&self, cx: Ctx<'g, T>, brain: Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        if brain.shape() != [self.brain_dim] {
            return Err(Error::invalid(format!(
                "projector expects brain vector [{}], got {:?}",
                self.brain_dim,
                brain.shape()
            )));
        }
        let tokens = brain.reshape(&[self.grid, self.brain_dim / self.grid])?;
        let mut x = self.input.forward(cx, tokens)?.add(&cx.p(self.positions))?;
        for block in &self.blocks {
            x = block.forward(cx, x, false)?;
        }
        let x = self.ln_final.forward(cx, x)?;
        self.output.forward(cx, x)
    }
}
