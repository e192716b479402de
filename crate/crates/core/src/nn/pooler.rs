use rand::Rng;

use super::{Ctx, Linear};
use crate::error::{Error, Result};
use crate::params::{normal, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Learnable queries attending over a variable-length sequence, producing a
/// fixed `[Q, d]` output.
#[derive(Debug, Clone)]
pub struct CrossAttentionPooler {
    pub queries: ParamId,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub num_queries: usize,
    pub dim: usize,
}

impl CrossAttentionPooler {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        rng: &mut impl Rng,
        name: &str,
        num_queries: usize,
        dim: usize,
    ) -> Self {
        Self {
            queries: ps.add(format!("{name}.queries"), normal(rng, &[num_queries, dim], 1.0)),
            key: Linear::new(ps, rng, &format!("{name}.key"), dim, dim, false),
            value: Linear::new(ps, rng, &format!("{name}.value"), dim, dim, false),
            output: Linear::new(ps, rng, &format!("{name}.output"), dim, dim, false),
            num_queries,
            dim,
        }
    }

    /// `softmax(queries·Kᵀ/√d)·V`, then the output projection.
    pub fn pool<'g, T: Scalar>(&self, cx: Ctx<'g, T>, sequence: Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        let shape = sequence.shape();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::invalid(format!(
                "pool expects [n, {}], got {shape:?}",
                self.dim
            )));
        }
        let k = self.key.forward(cx, sequence)?;
        let v = self.value.forward(cx, sequence)?;
        let scale = T::one() / T::lit(self.dim as f64).sqrt();
        let attn = cx
            .p(self.queries)
            .matmul(&k.transpose()?)?
            .scale(scale)?
            .softmax(1)?;
        self.output.forward(cx, attn.matmul(&v)?)
    }
}

/// Auxiliary-module encoder for one modality: raw features are projected to
/// the model width and pooled to `[Q, d]`.
#[derive(Debug, Clone)]
pub struct AuxEncoder {
    pub input: Linear,
    pub pooler: CrossAttentionPooler,
}

impl AuxEncoder {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        rng: &mut impl Rng,
        name: &str,
        raw_dim: usize,
        dim: usize,
        num_queries: usize,
    ) -> Self {
        Self {
            input: Linear::new(ps, rng, &format!("{name}.input"), raw_dim, dim, true),
            pooler: CrossAttentionPooler::new(ps, rng, &format!("{name}.pooler"), num_queries, dim),
        }
    }

    pub fn encode<'g, T: Scalar>(&self, cx: Ctx<'g, T>, raw: Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        let h = self.input.forward(cx, raw)?;
        self.pooler.pool(cx, h)
    }
}
