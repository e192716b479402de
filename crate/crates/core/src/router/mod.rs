//! Modality routing: soft merge, Gumbel-Softmax hard select, similarity
//! merge, and the weighted fusion of projector outputs.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Open01};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::{concat, Array, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    SoftMerge,
    HardSelect,
    SimilarityMerge,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::SoftMerge, Strategy::HardSelect, Strategy::SimilarityMerge];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::SoftMerge => "soft_merge",
            Strategy::HardSelect => "hard_select",
            Strategy::SimilarityMerge => "similarity_merge",
        }
    }

    /// Merge strategies get the log-barrier balance loss, selection the
    /// frequency-probability one.
    pub fn is_merge(self) -> bool {
        !matches!(self, Strategy::HardSelect)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown strategy `{s}` (expected soft_merge, hard_select or similarity_merge)"
                ))
            })
    }
}

/// Router weights. The gating MLP serves soft merge and hard select; the
/// query encoder serves similarity merge.
#[derive(Debug, Clone)]
pub struct RouterParams {
    pub gate_hidden: Linear,
    pub gate_out: Linear,
    pub query_hidden: Linear,
    pub query_out: Linear,
    pub modalities: usize,
}

impl RouterParams {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        rng: &mut impl Rng,
        name: &str,
        brain_dim: usize,
        hidden: usize,
        modalities: usize,
        embed_dim: usize,
    ) -> Result<Self> {
        if hidden < modalities {
            return Err(Error::invalid(format!(
                "router hidden width {hidden} must be at least M = {modalities}"
            )));
        }
        Ok(Self {
            gate_hidden: Linear::new(ps, rng, &format!("{name}.gate_hidden"), brain_dim, hidden, true),
            gate_out: Linear::new(ps, rng, &format!("{name}.gate_out"), hidden, modalities, true),
            query_hidden: Linear::new(ps, rng, &format!("{name}.query_hidden"), brain_dim, hidden, true),
            query_out: Linear::new(ps, rng, &format!("{name}.query_out"), hidden, embed_dim, true),
            modalities,
        })
    }

    fn mlp<'g, T: Scalar>(
        cx: Ctx<'g, T>,
        first: &Linear,
        second: &Linear,
        brain: Tensor<'g, T>,
    ) -> Result<Tensor<'g, T>> {
        let n = brain.shape().iter().product::<usize>();
        if n != first.in_dim {
            return Err(Error::invalid(format!(
                "router expects brain vector of {} values, got {:?}",
                first.in_dim,
                brain.shape()
            )));
        }
        let x = brain.reshape(&[1, n])?;
        let h = first.forward(cx, x)?.gelu()?;
        let out = second.forward(cx, h)?;
        out.reshape(&[second.out_dim])
    }

    /// Gating logits `MLP(b)`, shape `[M]`.
    pub fn gate_logits<'g, T: Scalar>(&self, cx: Ctx<'g, T>, brain: Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        Self::mlp(cx, &self.gate_hidden, &self.gate_out, brain)
    }

    /// Similarity-merge query `q`, shape `[d]`.
    pub fn query<'g, T: Scalar>(&self, cx: Ctx<'g, T>, brain: Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        Self::mlp(cx, &self.query_hidden, &self.query_out, brain)
    }
}

/// Per-sample routing result and the strategy-specific intermediates.
#[derive(Debug, Clone)]
pub struct RouterDecision<'g, T: Scalar> {
    pub strategy: Strategy,
    /// Weights over projectors, `[M]`.
    pub weights: Tensor<'g, T>,
    /// Gating logits (soft/hard) or similarity scores (similarity merge).
    pub logits: Tensor<'g, T>,
    /// Relaxed Gumbel-Softmax distribution `y` (hard select).
    pub relaxed: Option<Tensor<'g, T>>,
    pub noise: Option<Vec<T>>,
    pub tau: Option<T>,
    pub query: Option<Tensor<'g, T>>,
    pub keys: Option<Tensor<'g, T>>,
    /// Index picked by hard select.
    pub selected: Option<usize>,
}

impl<'g, T: Scalar> RouterDecision<'g, T> {
    pub fn weight_values(&self) -> Vec<T> {
        self.weights.to_vec()
    }
}

/// `w = softmax(MLP(b))`.
pub fn soft_merge<'g, T: Scalar>(
    cx: Ctx<'g, T>,
    params: &RouterParams,
    brain: Tensor<'g, T>,
) -> Result<RouterDecision<'g, T>> {
    let logits = params.gate_logits(cx, brain)?;
    let weights = logits.softmax(0)?;
    Ok(RouterDecision {
        strategy: Strategy::SoftMerge,
        weights,
        logits,
        relaxed: None,
        noise: None,
        tau: None,
        query: None,
        keys: None,
        selected: None,
    })
}

/// Draws `n` independent Gumbel(0, 1) values.
pub fn sample_gumbel(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = Open01.sample(rng);
            -(-u.ln()).ln()
        })
        .collect()
}

/// `y = softmax((log l + g) / τ)` from log-probabilities `log l`.
pub fn gumbel_softmax<'g, T: Scalar>(log_probs: Tensor<'g, T>, noise: &[T], tau: T) -> Result<Tensor<'g, T>> {
    if !(tau > T::zero()) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let m = log_probs.shape().iter().product::<usize>();
    if noise.len() != m {
        return Err(Error::invalid(format!(
            "gumbel noise has {} entries for {m} logits",
            noise.len()
        )));
    }
    let g = log_probs.graph().constant(Array::new(vec![m], noise.to_vec())?)?;
    log_probs.add(&g)?.scale(T::one() / tau)?.softmax(0)
}

/// Straight-through top-1: the forward value is the exact one-hot of
/// `argmax y` (lowest index on ties), the gradient flows to `y`.
pub fn straight_through_top1<'g, T: Scalar>(relaxed: Tensor<'g, T>) -> Result<(Tensor<'g, T>, usize)> {
    let y = relaxed.value();
    let k = crate::nn::argmax_index(y.data());
    let mut hard = Array::zeros(y.shape());
    hard.data_mut()[k] = T::one();
    Ok((relaxed.straight_through(hard)?, k))
}

/// Gumbel-Softmax selection over `l = softmax(MLP(b))`. Pass all-zero
/// `noise` for deterministic routing.
pub fn hard_select<'g, T: Scalar>(
    cx: Ctx<'g, T>,
    params: &RouterParams,
    brain: Tensor<'g, T>,
    tau: T,
    noise: &[T],
) -> Result<RouterDecision<'g, T>> {
    if !(tau > T::zero()) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let logits = params.gate_logits(cx, brain)?;
    let relaxed = gumbel_softmax(logits.log_softmax(0)?, noise, tau)?;
    let (weights, k) = straight_through_top1(relaxed)?;
    Ok(RouterDecision {
        strategy: Strategy::HardSelect,
        weights,
        logits,
        relaxed: Some(relaxed),
        noise: Some(noise.to_vec()),
        tau: Some(tau),
        query: None,
        keys: None,
        selected: Some(k),
    })
}

/// `wᵢ = softmax(q·kᵢ)` with `q` from the query encoder and `keys: [M, d]`.
pub fn similarity_merge<'g, T: Scalar>(
    cx: Ctx<'g, T>,
    params: &RouterParams,
    brain: Tensor<'g, T>,
    keys: Tensor<'g, T>,
) -> Result<RouterDecision<'g, T>> {
    let q = params.query(cx, brain)?;
    similarity_weights(q, keys, Strategy::SimilarityMerge)
}

/// Softmax of dot products between a query `[d]` and keys `[M, d]`.
pub fn similarity_weights<'g, T: Scalar>(
    query: Tensor<'g, T>,
    keys: Tensor<'g, T>,
    strategy: Strategy,
) -> Result<RouterDecision<'g, T>> {
    let d = query.shape().iter().product::<usize>();
    let ks = keys.shape();
    if ks.len() != 2 || ks[1] != d {
        return Err(Error::invalid(format!(
            "similarity keys must be [M, {d}], got {ks:?}"
        )));
    }
    let scores = keys.matmul(&query.reshape(&[d, 1])?)?.reshape(&[ks[0]])?;
    let weights = scores.softmax(0)?;
    Ok(RouterDecision {
        strategy,
        weights,
        logits: scores,
        relaxed: None,
        noise: None,
        tau: None,
        query: Some(query),
        keys: Some(keys),
        selected: None,
    })
}

/// Stacks `M` same-shaped outputs into `[M, numel]`.
pub fn stack<'g, T: Scalar>(outputs: &[Tensor<'g, T>]) -> Result<Tensor<'g, T>> {
    let first = outputs
        .first()
        .ok_or_else(|| Error::invalid("no projector outputs to stack"))?
        .shape();
    let n: usize = first.iter().product();
    let rows = outputs
        .iter()
        .map(|t| {
            if t.shape() != first {
                return Err(Error::invalid(format!(
                    "projector outputs differ in shape: {first:?} vs {:?}",
                    t.shape()
                )));
            }
            t.reshape(&[1, n])
        })
        .collect::<Result<Vec<_>>>()?;
    concat(&rows, 0)
}

/// `H = Σ wᵢ·Pᵢ(b)` for `weights: [M]` and `stacked: [M, k]`, giving `[k]`.
pub fn fuse<'g, T: Scalar>(weights: Tensor<'g, T>, stacked: Tensor<'g, T>) -> Result<Tensor<'g, T>> {
    let m = weights.shape().iter().product::<usize>();
    let s = stacked.shape();
    if s.len() != 2 || s[0] != m {
        return Err(Error::invalid(format!(
            "fuse: {m} weights for outputs of shape {s:?}"
        )));
    }
    weights.reshape(&[1, m])?.matmul(&stacked)?.reshape(&[s[1]])
}

#[cfg(test)]
mod tests;
