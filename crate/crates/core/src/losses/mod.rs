//! Captioning, alignment and load-balancing objectives and their
//! phase-level combinations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Ctx, SoftPrompt, ToyCausalDecoder};
use crate::scalar::Scalar;
use crate::tensor::{concat, Array, Tensor};

/// Progressive alignment schedule and phase-2 loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    /// Sigmoid sharpness `λ`.
    pub sharpness: f64,
    /// Step `t₀` at which the alignment weight reaches one half.
    pub midpoint: u64,
    /// Alignment weight `λ₁` in the routing phase.
    pub align_weight: f64,
    /// Balance weight `λ₂` in the routing phase.
    pub balance_weight: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            sharpness: 0.01,
            midpoint: 1500,
            align_weight: 1.0,
            balance_weight: 0.01,
        }
    }
}

impl ScheduleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sharpness > 0.0 && self.sharpness.is_finite()) {
            return Err(Error::Config(format!(
                "schedule sharpness must be positive, got {}",
                self.sharpness
            )));
        }
        for (name, v) in [("align_weight", self.align_weight), ("balance_weight", self.balance_weight)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// `α(t) = 1 / (1 + exp(−λ(t − t₀)))`.
pub fn alpha(t: u64, sched: &ScheduleParams) -> f64 {
    let x = sched.sharpness * (t as f64 - sched.midpoint as f64);
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean negative log-likelihood of `targets` under `logits: [T, V]`,
/// skipping positions whose target is `pad`.
pub fn captioning_loss_from_logits<'g, T: Scalar>(
    logits: Tensor<'g, T>,
    targets: &[usize],
    pad: Option<usize>,
) -> Result<Tensor<'g, T>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::invalid(format!(
            "captioning loss: logits {shape:?} for {} targets",
            targets.len()
        )));
    }
    let keep: Vec<bool> = targets.iter().map(|&t| Some(t) != pad).collect();
    let count = keep.iter().filter(|&&k| k).count();
    if count == 0 {
        return Err(Error::invalid("captioning loss: every target position is padding"));
    }
    let nll = logits.log_softmax(1)?.gather(targets)?;
    let picked = if count == targets.len() {
        nll
    } else {
        let mask = keep.iter().map(|&k| if k { T::one() } else { T::zero() }).collect();
        nll.mul(&logits.graph().constant(Array::vector(mask))?)?
    };
    picked.sum()?.scale(-T::one() / T::lit(count as f64))
}

/// Teacher-forced captioning loss with prefix `[S; z]`.
pub fn captioning_loss<'g, T: Scalar>(
    cx: Ctx<'g, T>,
    decoder: &ToyCausalDecoder,
    prompt: &SoftPrompt,
    z: Tensor<'g, T>,
    targets: &[usize],
    pad: Option<usize>,
) -> Result<Tensor<'g, T>> {
    if targets.is_empty() {
        return Err(Error::invalid("captioning loss: empty target"));
    }
    let prefix = concat(&[prompt.tensor(cx), z], 0)?;
    let logits = decoder.logits(cx, prefix, targets)?;
    captioning_loss_from_logits(logits, targets, pad)
}

/// Mean squared difference over all elements.
pub fn alignment_loss<'g, T: Scalar>(z_b: Tensor<'g, T>, z_m: Tensor<'g, T>) -> Result<Tensor<'g, T>> {
    z_b.squared_error(&z_m)?.mean()
}

/// `L_cap + α(t)·L_align`.
pub fn phase1_loss<'g, T: Scalar>(
    l_cap: Tensor<'g, T>,
    l_align: Tensor<'g, T>,
    t: u64,
    sched: &ScheduleParams,
) -> Result<Tensor<'g, T>> {
    l_cap.add(&l_align.scale(T::lit(alpha(t, sched)))?)
}

/// `−(1/N) Σᵢ Σₖ log w_{i,k}` over `weights: [N, M]`.
pub fn load_balance_merge<'g, T: Scalar>(weights: Tensor<'g, T>) -> Result<Tensor<'g, T>> {
    let shape = weights.shape();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::invalid(format!("merge balance expects [N, M] weights, got {shape:?}")));
    }
    if weights.value().data().iter().any(|&w| !(w > T::zero())) {
        return Err(Error::invalid(
            "merge balance needs strictly positive weights (one-hot routing belongs to the select loss)",
        ));
    }
    weights.log()?.sum()?.scale(-T::one() / T::lit(shape[0] as f64))
}

fn routing_counts(assignments: &[usize], modalities: usize) -> Result<Vec<usize>> {
    if assignments.is_empty() {
        return Err(Error::invalid("select balance over an empty batch"));
    }
    let mut counts = vec![0usize; modalities];
    for &a in assignments {
        if a >= modalities {
            return Err(Error::invalid(format!("assignment {a} outside [0, {modalities})")));
        }
        counts[a] += 1;
    }
    Ok(counts)
}

/// Routing fractions `fₖ` from hard assignments.
pub fn routing_fractions(assignments: &[usize], modalities: usize) -> Result<Vec<f64>> {
    let n = assignments.len() as f64;
    Ok(routing_counts(assignments, modalities)?
        .into_iter()
        .map(|c| c as f64 / n)
        .collect())
}

/// Coefficients `M·fₖ`, so that the select loss equals
/// `Σᵢ Σₖ cₖ·y_{i,k} / N`.
pub fn select_coefficients(assignments: &[usize], modalities: usize) -> Result<Vec<f64>> {
    let n = assignments.len() as f64;
    Ok(routing_counts(assignments, modalities)?
        .into_iter()
        .map(|c| (modalities * c) as f64 / n)
        .collect())
}

/// `M·Σₖ fₖ·Pₖ` with `Pₖ` the batch mean of the relaxed probabilities
/// `probs: [N, M]`. Gradient reaches `Pₖ` only.
///
/// Evaluated as `1 + Σₖ (M·fₖ − 1)·Pₖ`, which is the same quantity for
/// row-normalized probabilities and leaves the balanced value 1 and the
/// collapsed value M free of rounding.
pub fn load_balance_select<'g, T: Scalar>(assignments: &[usize], probs: Tensor<'g, T>) -> Result<Tensor<'g, T>> {
    let shape = probs.shape();
    if shape.len() != 2 || shape[0] != assignments.len() {
        return Err(Error::invalid(format!(
            "select balance: probs {shape:?} for {} assignments",
            assignments.len()
        )));
    }
    let coeffs = select_coefficients(assignments, shape[1])?;
    let g = probs.graph();
    let c = g.constant(Array::vector(coeffs.into_iter().map(|c| T::lit(c - 1.0)).collect()))?;
    probs.mean_axis(0)?.mul(&c)?.sum()?.add(&g.constant(Array::scalar(T::one()))?)
}

/// One sample's share of the merge balance loss in a batch of `n`.
pub fn merge_balance_row<'g, T: Scalar>(weights: Tensor<'g, T>, n: usize) -> Result<Tensor<'g, T>> {
    let m = weights.shape().iter().product::<usize>();
    load_balance_merge(weights.reshape(&[1, m])?)?.scale(T::one() / T::lit(n as f64))
}

/// One sample's share of the select balance loss in a batch of `n`, given
/// the batch-level coefficients from [`select_coefficients`].
pub fn select_balance_row<'g, T: Scalar>(relaxed: Tensor<'g, T>, coeffs: &[f64], n: usize) -> Result<Tensor<'g, T>> {
    let m = relaxed.shape().iter().product::<usize>();
    if coeffs.len() != m {
        return Err(Error::invalid(format!("{} coefficients for {m} modalities", coeffs.len())));
    }
    let n = n as f64;
    let g = relaxed.graph();
    let c = g.constant(Array::vector(coeffs.iter().map(|&c| T::lit((c - 1.0) / n)).collect()))?;
    relaxed
        .reshape(&[m])?
        .mul(&c)?
        .sum()?
        .add(&g.constant(Array::scalar(T::lit(1.0 / n)))?)
}

/// `L_cap + λ₁·L_align + λ₂·L_balance`.
pub fn phase2_loss<'g, T: Scalar>(
    l_cap: Tensor<'g, T>,
    l_align: Tensor<'g, T>,
    l_balance: Tensor<'g, T>,
    sched: &ScheduleParams,
) -> Result<Tensor<'g, T>> {
    l_cap
        .add(&l_align.scale(T::lit(sched.align_weight))?)?
        .add(&l_balance.scale(T::lit(sched.balance_weight))?)
}

#[cfg(test)]
mod tests;
