use rand::Rng;

use super::Ctx;
use crate::error::Result;
use crate::params::{normal, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{Array, Tensor};

const LN_EPS: f64 = 1e-5;

/// `y = x·W + b` over rows of `x`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        Self::with_std(ps, rng, name, in_dim, out_dim, bias, std)
    }

    pub fn with_std<T: Scalar>(
        ps: &mut ParamSet<T>,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        std: f64,
    ) -> Self {
        let weight = ps.add(format!("{name}.weight"), normal(rng, &[in_dim, out_dim], std));
        let bias = bias.then(|| ps.add(format!("{name}.bias"), Array::zeros([out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, cx: Ctx<'g, T>, x: Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        let y = x.matmul(&cx.p(self.weight))?;
        match self.bias {
            Some(b) => {
                let rows = y.shape()[0];
                y.add(&cx.p(b).broadcast_to(&[rows, self.out_dim])?)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Array::full([dim], T::one())),
            beta: ps.add(format!("{name}.beta"), Array::zeros([dim])),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, cx: Ctx<'g, T>, x: Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        x.layer_norm(&cx.p(self.gamma), &cx.p(self.beta), T::lit(LN_EPS))
    }
}
