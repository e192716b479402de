//! Central-difference gradient checking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{Array, Graph, Tensor};

/// Below this magnitude the relative error falls back to absolute error.
const DENOM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    fn new(tol: f64) -> Self {
        Self {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            checked: 0,
            tol,
            passed: true,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let denom = analytic.abs().max(numeric.abs());
        let rel = if denom < DENOM_FLOOR { abs } else { abs / denom };
        self.max_abs_err = self.max_abs_err.max(abs);
        self.max_rel_err = self.max_rel_err.max(rel);
        self.checked += 1;
        self.passed = self.max_rel_err <= self.tol;
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid(format!("eps must lie in (0, 1e-2], got {eps}")));
    }
    Ok(())
}

fn scalar_value<T: Scalar>(t: &Tensor<'_, T>) -> Result<f64> {
    if !t.shape().is_empty() {
        return Err(Error::NotScalar(t.shape()));
    }
    Ok(t.item().as_f64())
}

/// Compares the analytic gradient of the scalar function `f` at `x` against
/// central differences `(f(x+eps·eᵢ) − f(x−eps·eᵢ)) / 2eps`.
pub fn finite_difference_check<T, F>(f: F, x: &Array<T>, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: for<'g> Fn(&'g Graph<T>, Tensor<'g, T>) -> Result<Tensor<'g, T>>,
{
    check_eps(eps)?;
    let analytic = {
        let g = Graph::new();
        let xt = g.variable(x.clone())?;
        let y = f(&g, xt)?;
        scalar_value(&y)?;
        if y.requires_grad() {
            g.backward(y)?.get_or_zeros(&xt)
        } else {
            // Output does not depend on x at all.
            Array::zeros(x.shape())
        }
    };
    let eval = |point: Array<T>| -> Result<f64> {
        let g = Graph::new();
        let xt = g.constant(point)?;
        scalar_value(&f(&g, xt)?)
    };
    let mut report = GradCheckReport::new(tol);
    for i in 0..x.len() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.data_mut()[i] = plus.data()[i] + T::lit(eps);
        minus.data_mut()[i] = minus.data()[i] - T::lit(eps);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        report.record(analytic.data()[i].as_f64(), numeric);
    }
    Ok(report)
}

/// Gradient check of a scalar loss with respect to parameters. `coords`
/// selects which (parameter, flat index) entries to perturb.
pub fn check_params<T, F>(
    params: &ParamSet<T>,
    f: F,
    coords: &[(ParamId, usize)],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: for<'g> Fn(&'g Graph<T>, &'g ParamSet<T>) -> Result<Tensor<'g, T>>,
{
    check_eps(eps)?;
    let g = Graph::new();
    let loss = f(&g, params)?;
    scalar_value(&loss)?;
    let grads = g.backward(loss)?;
    let bound: std::collections::HashMap<_, _> = g.bound_params().into_iter().collect();

    let eval = |ps: &ParamSet<T>| -> Result<f64> {
        let g = Graph::new();
        scalar_value(&f(&g, ps)?)
    };
    let mut report = GradCheckReport::new(tol);
    let mut work = params.clone();
    for &(id, i) in coords {
        let analytic = bound
            .get(&id)
            .and_then(|t| grads.get(t))
            .map_or(0.0, |g| g.data()[i].as_f64());
        let orig = work.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = orig + T::lit(eps);
        let fp = eval(&work)?;
        work.get_mut(id).data_mut()[i] = orig - T::lit(eps);
        let fm = eval(&work)?;
        work.get_mut(id).data_mut()[i] = orig;
        report.record(analytic, (fp - fm) / (2.0 * eps));
    }
    Ok(report)
}

impl GradCheckReport {
    /// Folds another report into this one, keeping the worst errors.
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.checked += other.checked;
        self.tol = self.tol.max(other.tol);
        self.passed = self.passed && other.passed && self.max_rel_err <= self.tol;
    }

    pub fn empty(tol: f64) -> Self {
        Self::new(tol)
    }
}

/// A named gradient check, aggregated over its seeded inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

/// Seeded standard normal array; `salt` separates the draws of one case.
pub fn draw(seed: u64, salt: u64, shape: &[usize]) -> Array<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(salt);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    if shape.is_empty() {
        Array::scalar(data[0])
    } else {
        Array::new(shape.to_vec(), data).expect("positive dimensions")
    }
}

/// Reduces any output to a scalar through fixed random weights, so that
/// every output element contributes a distinct gradient.
fn readout<'g>(g: &'g Graph<f64>, y: Tensor<'g, f64>, seed: u64) -> Result<Tensor<'g, f64>> {
    let c = g.constant(draw(seed, 99, &y.shape()))?;
    y.mul(&c)?.sum()
}

fn konst<'g>(g: &'g Graph<f64>, seed: u64, shape: &[usize]) -> Result<Tensor<'g, f64>> {
    g.constant(draw(seed, 7, shape))
}

type Case = for<'g> fn(&'g Graph<f64>, Tensor<'g, f64>, u64) -> Result<Tensor<'g, f64>>;

/// Input shape, whether the input must be positive, and the op under test.
const PRIMITIVES: &[(&str, &[usize], bool, Case)] = &[
    ("matmul/lhs", &[3, 4], false, |g, x, s| x.matmul(&konst(g, s, &[4, 2])?)),
    ("matmul/rhs", &[3, 4], false, |g, x, s| konst(g, s, &[2, 3])?.matmul(&x)),
    ("add", &[3, 4], false, |g, x, s| x.add(&konst(g, s, &[3, 4])?)),
    ("sub", &[3, 4], false, |g, x, s| konst(g, s, &[3, 4])?.sub(&x)),
    ("mul", &[3, 4], false, |g, x, s| x.mul(&konst(g, s, &[3, 4])?)),
    ("mul/fan-out", &[3, 4], false, |_, x, _| x.mul(&x)),
    ("scalar-mul", &[3, 4], false, |_, x, _| x.scale(-0.7)),
    ("squared-error", &[3, 4], false, |g, x, s| x.squared_error(&konst(g, s, &[3, 4])?)),
    ("exp", &[3, 4], false, |_, x, _| x.exp()),
    ("log", &[3, 4], true, |_, x, _| x.log()),
    ("sigmoid", &[3, 4], false, |_, x, _| x.sigmoid()),
    ("gelu", &[3, 4], false, |_, x, _| x.gelu()),
    ("softmax/0", &[3, 4], false, |_, x, _| x.softmax(0)),
    ("softmax/1", &[3, 4], false, |_, x, _| x.softmax(1)),
    ("log-softmax/0", &[3, 4], false, |_, x, _| x.log_softmax(0)),
    ("log-softmax/1", &[3, 4], false, |_, x, _| x.log_softmax(1)),
    ("sum/0", &[3, 4], false, |_, x, _| x.sum_axis(0)),
    ("sum/1", &[3, 4], false, |_, x, _| x.sum_axis(1)),
    ("sum/all", &[3, 4], false, |_, x, _| x.sum()),
    ("mean/0", &[3, 4], false, |_, x, _| x.mean_axis(0)),
    ("mean/1", &[3, 4], false, |_, x, _| x.mean_axis(1)),
    ("mean/all", &[3, 4], false, |_, x, _| x.mean()),
    ("transpose", &[3, 4], false, |_, x, _| x.transpose()),
    ("concat/0", &[3, 4], false, |g, x, s| super::concat(&[x, konst(g, s, &[2, 4])?, x], 0)),
    ("concat/1", &[3, 4], false, |g, x, s| super::concat(&[konst(g, s, &[3, 1])?, x], 1)),
    ("slice/0", &[3, 4], false, |_, x, _| x.slice(0, 1, 3)),
    ("slice/1", &[3, 4], false, |_, x, _| x.slice(1, 1, 3)),
    ("broadcast", &[1, 4], false, |_, x, _| x.broadcast_to(&[3, 4])),
    ("reshape", &[3, 4], false, |_, x, _| x.reshape(&[2, 6])),
    ("layer-norm/x", &[3, 4], false, |g, x, s| {
        let (gamma, beta) = (g.constant(draw(s, 11, &[4]))?, g.constant(draw(s, 12, &[4]))?);
        x.layer_norm(&gamma, &beta, 1e-5)
    }),
    ("layer-norm/affine", &[4], false, |g, p, s| {
        let x = konst(g, s, &[3, 4])?;
        x.layer_norm(&p, &p.scale(0.5)?, 1e-5)
    }),
    ("embedding", &[5, 3], false, |_, t, _| t.embedding(&[0, 3, 3, 1])),
    ("gather", &[3, 4], false, |_, x, _| x.gather(&[1, 0, 3])),
];

/// Runs every differentiable primitive through [`finite_difference_check`]
/// on `seeds` random inputs each. Straight-through is left out: its
/// gradient is deliberately not the derivative of its forward value.
pub fn primitive_suite(seeds: u64, eps: f64, tol: f64) -> Result<Vec<SuiteEntry>> {
    PRIMITIVES
        .iter()
        .map(|&(name, shape, positive, case)| {
            let mut report = GradCheckReport::new(tol);
            for seed in 0..seeds {
                let mut x = draw(seed, 1, shape);
                if positive {
                    x = x.map(|v| v.abs() + 0.5);
                }
                let r = finite_difference_check(|g, x| readout(g, case(g, x, seed)?, seed), &x, eps, tol)?;
                report.merge(&r);
            }
            Ok(SuiteEntry {
                name: name.to_string(),
                report,
            })
        })
        .collect()
}
