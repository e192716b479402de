use rand::Rng;

use super::{Ctx, LayerNorm, Linear};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::{concat, Array, Tensor};

/// Added to masked attention scores. Finite so the non-finite guard stays
/// meaningful; `exp` of it underflows to exactly zero.
const MASKED: f64 = -1e30;

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, rng: &mut impl Rng, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            query: Linear::new(ps, rng, &format!("{name}.query"), dim, dim, false),
            key: Linear::new(ps, rng, &format!("{name}.key"), dim, dim, false),
            value: Linear::new(ps, rng, &format!("{name}.value"), dim, dim, false),
            output: Linear::new(ps, rng, &format!("{name}.output"), dim, dim, true),
            heads,
            dim,
        }
    }

    /// Self-attention over the rows of `x: [n, dim]`.
    pub fn forward<'g, T: Scalar>(&self, cx: Ctx<'g, T>, x: Tensor<'g, T>, causal: bool) -> Result<Tensor<'g, T>> {
        let n = x.shape()[0];
        let q = self.query.forward(cx, x)?;
        let k = self.key.forward(cx, x)?;
        let v = self.value.forward(cx, x)?;
        let hd = self.dim / self.heads;
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let mask = if causal && n > 1 {
            let mut m = Array::<T>::zeros([n, n]);
            for i in 0..n {
                for j in i + 1..n {
                    m.data_mut()[i * n + j] = T::lit(MASKED);
                }
            }
            Some(cx.graph.constant(m)?)
        } else {
            None
        };
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * hd, (h + 1) * hd);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (q.slice(1, lo, hi)?, k.slice(1, lo, hi)?, v.slice(1, lo, hi)?)
            };
            let mut scores = qh.matmul(&kh.transpose()?)?.scale(scale)?;
            if let Some(m) = &mask {
                scores = scores.add(m)?;
            }
            outs.push(scores.softmax(1)?.matmul(&vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { concat(&outs, 1)? };
        self.output.forward(cx, merged)
    }
}

/// Pre-norm transformer block: attention and a GELU feed-forward, each with a
/// residual connection.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub fc_in: Linear,
    pub fc_out: Linear,
}

impl Block {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_mult: usize,
    ) -> Self {
        let hidden = dim * ffn_mult;
        Self {
            ln_attn: LayerNorm::new(ps, &format!("{name}.ln_attn"), dim),
            attn: MultiHeadAttention::new(ps, rng, &format!("{name}.attn"), dim, heads),
            ln_ffn: LayerNorm::new(ps, &format!("{name}.ln_ffn"), dim),
            fc_in: Linear::new(ps, rng, &format!("{name}.fc_in"), dim, hidden, true),
            fc_out: Linear::new(ps, rng, &format!("{name}.fc_out"), hidden, dim, true),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, cx: Ctx<'g, T>, x: Tensor<'g, T>, causal: bool) -> Result<Tensor<'g, T>> {
        if x.shape().len() != 2 || x.shape()[1] != self.attn.dim {
            return Err(Error::invalid(format!(
                "block expects [n, {}], got {:?}",
                self.attn.dim,
                x.shape()
            )));
        }
        let h = self.ln_attn.forward(cx, x)?;
        let x = x.add(&self.attn.forward(cx, h, causal)?)?;
        let h = self.ln_ffn.forward(cx, x)?;
        let h = self.fc_out.forward(cx, self.fc_in.forward(cx, h)?.gelu()?)?;
        x.add(&h)
    }
}
