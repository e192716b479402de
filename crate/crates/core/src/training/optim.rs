//! AdamW with decoupled weight decay.

use super::config::OptimConfig;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Array;

/// Gradient per parameter, indexed by `ParamId`.
#[derive(Debug, Clone)]
pub struct ParamGrads<T> {
    grads: Vec<Option<Array<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn new(len: usize) -> Self {
        Self {
            grads: vec![None; len],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn set(&mut self, id: ParamId, g: Array<T>) {
        self.grads[id.0] = Some(g);
    }

    /// Adds `g` into the slot for `id`.
    pub fn accumulate(&mut self, id: ParamId, g: &Array<T>) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &ParamGrads<T>) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    /// Global L2 norm over the listed parameters.
    pub fn norm(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .filter_map(|&id| self.get(id))
            .map(|g| g.data().iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed updates.
    pub step: u64,
    pub trainable: Vec<ParamId>,
    pub m: Vec<Array<T>>,
    pub v: Vec<Array<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: &OptimConfig, params: &ParamSet<T>, trainable: Vec<ParamId>) -> Self {
        let zeros: Vec<Array<T>> = trainable.iter().map(|&id| Array::zeros(params.get(id).shape())).collect();
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            trainable,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update of every trainable parameter. Every trainable parameter
    /// must have a gradient.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &ParamGrads<T>) -> Result<()> {
        for &id in &self.trainable {
            let g = grads
                .get(id)
                .ok_or_else(|| Error::MissingGrad(params.name(id).to_string()))?;
            if g.shape() != params.get(id).shape() {
                return Err(Error::invalid(format!(
                    "gradient for {} has shape {:?}, parameter {:?}",
                    params.name(id),
                    g.shape(),
                    params.get(id).shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let bc1 = T::lit(1.0 - self.beta1.powi(t));
        let bc2 = T::lit(1.0 - self.beta2.powi(t));
        let lr = T::lit(self.lr);
        let decay = T::lit(self.lr * self.weight_decay);
        let eps = T::lit(self.eps);
        for (k, &id) in self.trainable.iter().enumerate() {
            let g = grads.get(id).expect("checked above").data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps) - decay * p[i];
            }
        }
        Ok(())
    }
}
