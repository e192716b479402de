use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Block, Ctx, LayerNorm, Linear};
use crate::error::{Error, Result};
use crate::params::{normal, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{concat, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
    pub max_positions: usize,
    /// Token that ends generation.
    pub eos: usize,
}

/// Small causal transformer language model conditioned on a prefix of
/// embeddings.
#[derive(Debug, Clone)]
pub struct ToyCausalDecoder {
    pub config: DecoderConfig,
    pub tokens: ParamId,
    pub positions: ParamId,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
    pub head: Linear,
}

impl ToyCausalDecoder {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, rng: &mut impl Rng, name: &str, config: DecoderConfig) -> Self {
        let d = config.dim;
        Self {
            tokens: ps.add(format!("{name}.tokens"), normal(rng, &[config.vocab, d], 1.0)),
            positions: ps.add(
                format!("{name}.positions"),
                normal(rng, &[config.max_positions, d], 0.1),
            ),
            blocks: (0..config.layers)
                .map(|i| {
                    Block::new(
                        ps,
                        rng,
                        &format!("{name}.block{i}"),
                        d,
                        config.heads,
                        config.ffn_mult,
                    )
                })
                .collect(),
            ln_final: LayerNorm::new(ps, &format!("{name}.ln_final"), d),
            head: Linear::new(ps, rng, &format!("{name}.head"), d, config.vocab, false),
            config,
        }
    }

    /// Logits `[len(tokens), V]`; row `k` predicts `tokens[k]` from the prefix
    /// and `tokens[..k]`.
    pub fn logits<'g, T: Scalar>(
        &self,
        cx: Ctx<'g, T>,
        prefix: Tensor<'g, T>,
        tokens: &[usize],
    ) -> Result<Tensor<'g, T>> {
        let pshape = prefix.shape();
        if pshape.len() != 2 || pshape[0] == 0 || pshape[1] != self.config.dim {
            return Err(Error::invalid(format!(
                "decoder prefix must be [p, {}], got {pshape:?}",
                self.config.dim
            )));
        }
        if tokens.is_empty() {
            return Err(Error::invalid("decoder needs at least one target position"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::invalid(format!(
                "token id {bad} out of range for vocabulary {}",
                self.config.vocab
            )));
        }
        let p = pshape[0];
        let len = p + tokens.len() - 1;
        if len > self.config.max_positions {
            return Err(Error::invalid(format!(
                "sequence of {len} exceeds {} positions",
                self.config.max_positions
            )));
        }
        let x = if tokens.len() > 1 {
            let emb = cx.p(self.tokens).embedding(&tokens[..tokens.len() - 1])?;
            concat(&[prefix, emb], 0)?
        } else {
            prefix
        };
        let mut x = x.add(&cx.p(self.positions).slice(0, 0, len)?)?;
        for block in &self.blocks {
            x = block.forward(cx, x, true)?;
        }
        let h = x.slice(0, p - 1, len)?;
        let h = self.ln_final.forward(cx, h)?;
        self.head.forward(cx, h)
    }

    /// Argmax decoding until the end-of-sequence token or `max_len` tokens.
    /// The end token, when produced, is included.
    pub fn decode_greedy<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        prefix: &crate::tensor::Array<T>,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        let mut out: Vec<usize> = Vec::new();
        while out.len() < max_len {
            let g = crate::tensor::Graph::new();
            let cx = Ctx::new(&g, params);
            let pre = g.constant(prefix.clone())?;
            // The last row only depends on the real tokens; the appended
            // placeholder is never read.
            let mut probe = out.clone();
            probe.push(0);
            let logits = self.logits(cx, pre, &probe)?;
            let last = logits.value();
            let row = last.row(probe.len() - 1);
            let next = argmax_index(row);
            out.push(next);
            if next == self.config.eos {
                break;
            }
        }
        Ok(out)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_index<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
