use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use super::array::{axis_split, Array};
use super::kernels;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;

pub type NodeId = usize;

/// Primitive kinds, used for error messages and the gradient-check suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    ScalarMul,
    Exp,
    Log,
    Sigmoid,
    Gelu,
    Softmax,
    LogSoftmax,
    Sum,
    Mean,
    Transpose,
    Concat,
    Slice,
    Broadcast,
    Reshape,
    LayerNorm,
    Embedding,
    Gather,
    SquaredError,
    StraightThrough,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::ScalarMul => "scalar-mul",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Gelu => "gelu",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log-softmax",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Transpose => "transpose",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Broadcast => "broadcast",
            OpKind::Reshape => "reshape",
            OpKind::LayerNorm => "layer-norm",
            OpKind::Embedding => "embedding",
            OpKind::Gather => "gather",
            OpKind::SquaredError => "squared-error",
            OpKind::StraightThrough => "straight-through",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Exp(NodeId),
    Log(NodeId),
    Sigmoid(NodeId),
    Gelu(NodeId),
    Softmax(NodeId, usize),
    LogSoftmax(NodeId, usize),
    Sum(NodeId, Option<usize>),
    Mean(NodeId, Option<usize>),
    Transpose(NodeId),
    Concat(Vec<NodeId>, usize),
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
    },
    Broadcast(NodeId),
    Reshape(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    Gather {
        input: NodeId,
        index: Vec<usize>,
    },
    SquaredError(NodeId, NodeId),
    StraightThrough(NodeId),
}

struct Node<T> {
    value: Arc<Array<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of one forward pass. Build a fresh graph per step and
/// drop it after [`Graph::backward`].
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    bound: RefCell<HashMap<ParamId, NodeId>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Tensor<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: NodeId,
}

impl<T: Scalar> fmt::Debug for Tensor<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Array<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, t: &Tensor<'_, T>) -> Option<&Array<T>> {
        self.grads.get(t.id).and_then(|g| g.as_ref())
    }

    /// Moves the gradient of `t` out.
    pub fn take(&mut self, t: &Tensor<'_, T>) -> Option<Array<T>> {
        self.grads.get_mut(t.id).and_then(Option::take)
    }

    /// Gradient of `t`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, t: &Tensor<'_, T>) -> Array<T> {
        self.get(t)
            .cloned()
            .unwrap_or_else(|| Array::zeros(t.shape()))
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, kind: OpKind, value: Array<T>, op: Op<T>, requires_grad: bool) -> Result<Tensor<'_, T>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: kind });
        }
        let op = if requires_grad { op } else { Op::Leaf };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Tensor {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    fn push_shared(&self, value: Arc<Array<T>>, requires_grad: bool) -> Tensor<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Tensor {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&self, value: Array<T>) -> Result<Tensor<'_, T>> {
        self.push(OpKind::Leaf, value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient during backward.
    pub fn variable(&self, value: Array<T>) -> Result<Tensor<'_, T>> {
        self.push(OpKind::Leaf, value, Op::Leaf, true)
    }

    /// Binds a parameter as a gradient-tracked leaf. Repeated binds return the
    /// same node, so gradients from every use accumulate.
    pub fn param(&self, params: &ParamSet<T>, id: ParamId) -> Tensor<'_, T> {
        if let Some(&node) = self.bound.borrow().get(&id) {
            return Tensor { graph: self, id: node };
        }
        let t = self.push_shared(params.shared(id), true);
        self.bound.borrow_mut().insert(id, t.id);
        t
    }

    /// Parameters bound into this graph, with their node ids.
    pub fn bound_params(&self) -> Vec<(ParamId, Tensor<'_, T>)> {
        let mut v: Vec<_> = self
            .bound
            .borrow()
            .iter()
            .map(|(&p, &id)| (p, Tensor { graph: self, id }))
            .collect();
        v.sort_by_key(|(p, _)| *p);
        v
    }

    fn value(&self, id: NodeId) -> Arc<Array<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse-mode pass from a scalar loss. Nodes are visited once each, in
    /// strict reverse append order.
    pub fn backward(&self, loss: Tensor<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.shape().is_empty() {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::EmptyGraph);
        }
        let mut grads: Vec<Option<Array<T>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Array::scalar(T::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Array<T>>], nodes: &[Node<T>], id: NodeId, g: Array<T>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &Array<T>, grads: &mut [Option<Array<T>>]) {
    let val = |id: NodeId| -> &Array<T> { &nodes[id].value };
    let rg = |id: NodeId| nodes[id].requires_grad;
    let out = &node.value;
    let gd = g.data();
    let shaped = |shape: &[usize], data: Vec<T>| Array::from_parts(shape.to_vec(), data);

    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if rg(*a) {
                let da = kernels::matmul_nt(gd, bv.data(), m, n, k);
                accumulate(grads, nodes, *a, shaped(av.shape(), da));
            }
            if rg(*b) {
                let db = kernels::matmul_tn(av.data(), gd, m, k, n);
                accumulate(grads, nodes, *b, shaped(bv.shape(), db));
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if rg(*a) {
                let d = gd.iter().zip(bv.data()).map(|(&g, &y)| g * y).collect();
                accumulate(grads, nodes, *a, shaped(av.shape(), d));
            }
            if rg(*b) {
                let d = gd.iter().zip(av.data()).map(|(&g, &x)| g * x).collect();
                accumulate(grads, nodes, *b, shaped(bv.shape(), d));
            }
        }
        Op::Scale(a, c) => {
            let c = *c;
            accumulate(grads, nodes, *a, g.map(|x| x * c));
        }
        Op::Exp(a) => {
            let d = gd.iter().zip(out.data()).map(|(&g, &y)| g * y).collect();
            accumulate(grads, nodes, *a, shaped(out.shape(), d));
        }
        Op::Log(a) => {
            let d = gd.iter().zip(val(*a).data()).map(|(&g, &x)| g / x).collect();
            accumulate(grads, nodes, *a, shaped(out.shape(), d));
        }
        Op::Sigmoid(a) => {
            let d = gd
                .iter()
                .zip(out.data())
                .map(|(&g, &y)| g * y * (T::one() - y))
                .collect();
            accumulate(grads, nodes, *a, shaped(out.shape(), d));
        }
        Op::Gelu(a) => {
            let d = gd
                .iter()
                .zip(val(*a).data())
                .map(|(&g, &x)| g * kernels::gelu_grad(x))
                .collect();
            accumulate(grads, nodes, *a, shaped(out.shape(), d));
        }
        Op::Softmax(a, axis) => {
            let (outer, len, inner) = axis_split(out.shape(), *axis);
            let y = out.data();
            let mut d = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let mut dot = T::zero();
                    for j in 0..len {
                        dot = dot + gd[at(j)] * y[at(j)];
                    }
                    for j in 0..len {
                        d[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                    }
                }
            }
            accumulate(grads, nodes, *a, shaped(out.shape(), d));
        }
        Op::LogSoftmax(a, axis) => {
            let (outer, len, inner) = axis_split(out.shape(), *axis);
            let y = out.data();
            let mut d = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let mut gsum = T::zero();
                    for j in 0..len {
                        gsum = gsum + gd[at(j)];
                    }
                    for j in 0..len {
                        d[at(j)] = gd[at(j)] - y[at(j)].exp() * gsum;
                    }
                }
            }
            accumulate(grads, nodes, *a, shaped(out.shape(), d));
        }
        Op::Sum(a, axis) | Op::Mean(a, axis) => {
            let shape = val(*a).shape().to_vec();
            let (outer, len, inner) = match axis {
                Some(ax) => axis_split(&shape, *ax),
                None => (1, shape.iter().product(), 1),
            };
            let mut d = kernels::expand_axis(gd, outer, len, inner);
            if matches!(node.op, Op::Mean(..)) {
                let scale = T::one() / T::lit(len as f64);
                for x in &mut d {
                    *x = *x * scale;
                }
            }
            accumulate(grads, nodes, *a, shaped(&shape, d));
        }
        Op::Transpose(a) => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            let d = kernels::transpose(gd, r, c);
            accumulate(grads, nodes, *a, shaped(&[c, r], d));
        }
        Op::Concat(inputs, axis) => {
            let (outer, _, inner) = axis_split(out.shape(), *axis);
            let total = out.shape()[*axis];
            let mut offset = 0;
            for &inp in inputs {
                let shape = val(inp).shape().to_vec();
                let len = shape[*axis];
                if rg(inp) {
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        d.extend_from_slice(&gd[base..base + len * inner]);
                    }
                    accumulate(grads, nodes, inp, shaped(&shape, d));
                }
                offset += len;
            }
        }
        Op::Slice { input, axis, start } => {
            let shape = val(*input).shape().to_vec();
            let (outer, total, inner) = axis_split(&shape, *axis);
            let len = out.shape()[*axis];
            let mut d = vec![T::zero(); shape.iter().product()];
            for o in 0..outer {
                let base = o * total * inner + start * inner;
                d[base..base + len * inner]
                    .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(grads, nodes, *input, shaped(&shape, d));
        }
        Op::Broadcast(a) => {
            let shape = val(*a).shape().to_vec();
            let map = broadcast_index(&shape, out.shape());
            let mut d = vec![T::zero(); shape.iter().product()];
            for (o, &src) in map.iter().enumerate() {
                d[src] = d[src] + gd[o];
            }
            accumulate(grads, nodes, *a, shaped(&shape, d));
        }
        Op::Reshape(a) => {
            let shape = val(*a).shape().to_vec();
            accumulate(grads, nodes, *a, shaped(&shape, gd.to_vec()));
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let xv = val(*x);
            let gam = val(*gamma).data();
            let dim = *xv.shape().last().unwrap();
            let rows = xv.len() / dim;
            let mut dx = vec![T::zero(); xv.len()];
            let mut dgamma = vec![T::zero(); dim];
            let mut dbeta = vec![T::zero(); dim];
            let n = T::lit(dim as f64);
            for r in 0..rows {
                let xs = &xv.data()[r * dim..(r + 1) * dim];
                let gs = &gd[r * dim..(r + 1) * dim];
                let (mean, rstd) = row_stats(xs, *eps);
                let mut sum_dxhat = T::zero();
                let mut sum_dxhat_xhat = T::zero();
                for j in 0..dim {
                    let xhat = (xs[j] - mean) * rstd;
                    let dxhat = gs[j] * gam[j];
                    sum_dxhat = sum_dxhat + dxhat;
                    sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                    dgamma[j] = dgamma[j] + gs[j] * xhat;
                    dbeta[j] = dbeta[j] + gs[j];
                }
                for j in 0..dim {
                    let xhat = (xs[j] - mean) * rstd;
                    let dxhat = gs[j] * gam[j];
                    dx[r * dim + j] = rstd / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                }
            }
            accumulate(grads, nodes, *x, shaped(xv.shape(), dx));
            accumulate(grads, nodes, *gamma, shaped(&[dim], dgamma));
            accumulate(grads, nodes, *beta, shaped(&[dim], dbeta));
        }
        Op::Embedding { table, ids } => {
            let tv = val(*table);
            let dim = tv.shape()[1];
            let mut d = vec![T::zero(); tv.len()];
            for (r, &id) in ids.iter().enumerate() {
                for j in 0..dim {
                    d[id * dim + j] = d[id * dim + j] + gd[r * dim + j];
                }
            }
            accumulate(grads, nodes, *table, shaped(tv.shape(), d));
        }
        Op::Gather { input, index } => {
            let iv = val(*input);
            let cols = iv.shape()[1];
            let mut d = vec![T::zero(); iv.len()];
            for (r, &c) in index.iter().enumerate() {
                d[r * cols + c] = gd[r];
            }
            accumulate(grads, nodes, *input, shaped(iv.shape(), d));
        }
        Op::SquaredError(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let two = T::lit(2.0);
            let diff: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect();
            if rg(*a) {
                let d = diff.iter().zip(gd).map(|(&e, &g)| two * e * g).collect();
                accumulate(grads, nodes, *a, shaped(av.shape(), d));
            }
            if rg(*b) {
                let d = diff.iter().zip(gd).map(|(&e, &g)| -(two * e * g)).collect();
                accumulate(grads, nodes, *b, shaped(bv.shape(), d));
            }
        }
        Op::StraightThrough(soft) => {
            accumulate(grads, nodes, *soft, g.clone());
        }
    }
}

fn row_stats<T: Scalar>(xs: &[T], eps: T) -> (T, T) {
    let n = T::lit(xs.len() as f64);
    let mean = xs.iter().fold(T::zero(), |a, &x| a + x) / n;
    let var = xs.iter().fold(T::zero(), |a, &x| a + (x - mean) * (x - mean)) / n;
    (mean, T::one() / (var + eps).sqrt())
}

/// For each element of `to`, the flat index of the `from` element it copies.
fn broadcast_index(from: &[usize], to: &[usize]) -> Vec<usize> {
    let offset = to.len() - from.len();
    let mut strides = vec![0usize; to.len()];
    let mut s = 1;
    for i in (0..from.len()).rev() {
        strides[i + offset] = if from[i] == 1 { 0 } else { s };
        s *= from[i];
    }
    let n: usize = to.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; to.len()];
    for _ in 0..n {
        out.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..to.len()).rev() {
            idx[d] += 1;
            if idx[d] < to[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

fn can_broadcast(from: &[usize], to: &[usize]) -> bool {
    if from.len() > to.len() {
        return false;
    }
    let offset = to.len() - from.len();
    from.iter()
        .enumerate()
        .all(|(i, &d)| d == 1 || d == to[i + offset])
}

impl<'g, T: Scalar> Tensor<'g, T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Arc<Array<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.value().data().to_vec()
    }

    fn unary(&self, kind: OpKind, value: Array<T>, op: Op<T>) -> Result<Tensor<'g, T>> {
        self.graph.push(kind, value, op, self.requires_grad())
    }

    fn same_shape(&self, other: &Tensor<'g, T>, kind: OpKind) -> Result<(Arc<Array<T>>, Arc<Array<T>>)> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::Shape {
                op: kind,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok((a, b))
    }

    fn zip_with(&self, other: &Tensor<'g, T>, kind: OpKind, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<'g, T>> {
        let (a, b) = self.same_shape(other, kind)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.requires_grad() || other.requires_grad();
        self.graph
            .push(kind, Array::from_parts(a.shape().to_vec(), data), op, rg)
    }

    /// Rank-2 matrix product.
    pub fn matmul(&self, other: &Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::Shape {
                op: OpKind::MatMul,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let data = kernels::matmul(a.data(), b.data(), m, k, n);
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(
            OpKind::MatMul,
            Array::from_parts(vec![m, n], data),
            Op::MatMul(self.id, other.id),
            rg,
        )
    }

    pub fn add(&self, other: &Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        self.zip_with(other, OpKind::Add, Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(&self, other: &Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        self.zip_with(other, OpKind::Sub, Op::Sub(self.id, other.id), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        self.zip_with(other, OpKind::Mul, Op::Mul(self.id, other.id), |x, y| x * y)
    }

    pub fn squared_error(&self, other: &Tensor<'g, T>) -> Result<Tensor<'g, T>> {
        self.zip_with(
            other,
            OpKind::SquaredError,
            Op::SquaredError(self.id, other.id),
            |x, y| (x - y) * (x - y),
        )
    }

    pub fn scale(&self, c: T) -> Result<Tensor<'g, T>> {
        let v = self.value().map(|x| x * c);
        self.unary(OpKind::ScalarMul, v, Op::Scale(self.id, c))
    }

    pub fn exp(&self) -> Result<Tensor<'g, T>> {
        let v = self.value().map(|x| x.exp());
        self.unary(OpKind::Exp, v, Op::Exp(self.id))
    }

    pub fn log(&self) -> Result<Tensor<'g, T>> {
        let v = self.value().map(|x| x.ln());
        self.unary(OpKind::Log, v, Op::Log(self.id))
    }

    pub fn sigmoid(&self) -> Result<Tensor<'g, T>> {
        let v = self.value().map(kernels::sigmoid);
        self.unary(OpKind::Sigmoid, v, Op::Sigmoid(self.id))
    }

    pub fn gelu(&self) -> Result<Tensor<'g, T>> {
        let v = self.value().map(kernels::gelu);
        self.unary(OpKind::Gelu, v, Op::Gelu(self.id))
    }

    fn check_axis(&self, axis: usize, kind: OpKind) -> Result<Arc<Array<T>>> {
        let a = self.value();
        if axis >= a.rank() {
            return Err(Error::Shape {
                op: kind,
                lhs: a.shape().to_vec(),
                rhs: vec![axis],
            });
        }
        Ok(a)
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor<'g, T>> {
        let a = self.check_axis(axis, OpKind::Softmax)?;
        let (o, l, i) = axis_split(a.shape(), axis);
        let v = Array::from_parts(a.shape().to_vec(), kernels::softmax(a.data(), o, l, i));
        self.unary(OpKind::Softmax, v, Op::Softmax(self.id, axis))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<'g, T>> {
        let a = self.check_axis(axis, OpKind::LogSoftmax)?;
        let (o, l, i) = axis_split(a.shape(), axis);
        let v = Array::from_parts(a.shape().to_vec(), kernels::log_softmax(a.data(), o, l, i));
        self.unary(OpKind::LogSoftmax, v, Op::LogSoftmax(self.id, axis))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<'g, T>> {
        let a = self.check_axis(axis, OpKind::Sum)?;
        let (o, l, i) = axis_split(a.shape(), axis);
        let mut shape = a.shape().to_vec();
        shape.remove(axis);
        let v = Array::from_parts(shape, kernels::sum_axis(a.data(), o, l, i));
        self.unary(OpKind::Sum, v, Op::Sum(self.id, Some(axis)))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<'g, T>> {
        let a = self.check_axis(axis, OpKind::Mean)?;
        let (o, l, i) = axis_split(a.shape(), axis);
        let mut shape = a.shape().to_vec();
        shape.remove(axis);
        let scale = T::one() / T::lit(l as f64);
        let data = kernels::sum_axis(a.data(), o, l, i)
            .into_iter()
            .map(|x| x * scale)
            .collect();
        self.unary(OpKind::Mean, Array::from_parts(shape, data), Op::Mean(self.id, Some(axis)))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Result<Tensor<'g, T>> {
        let v = Array::scalar(self.value().sum());
        self.unary(OpKind::Sum, v, Op::Sum(self.id, None))
    }

    pub fn mean(&self) -> Result<Tensor<'g, T>> {
        let a = self.value();
        let v = Array::scalar(a.sum() / T::lit(a.len() as f64));
        self.unary(OpKind::Mean, v, Op::Mean(self.id, None))
    }

    /// Rank-2 transpose.
    pub fn transpose(&self) -> Result<Tensor<'g, T>> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(Error::Shape {
                op: OpKind::Transpose,
                lhs: a.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let v = Array::from_parts(vec![c, r], kernels::transpose(a.data(), r, c));
        self.unary(OpKind::Transpose, v, Op::Transpose(self.id))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor<'g, T>> {
        let a = self.check_axis(axis, OpKind::Slice)?;
        let shape = a.shape();
        if start >= end || end > shape[axis] {
            return Err(Error::Shape {
                op: OpKind::Slice,
                lhs: shape.to_vec(),
                rhs: vec![start, end],
            });
        }
        let (outer, total, inner) = axis_split(shape, axis);
        let len = end - start;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * total * inner + start * inner;
            data.extend_from_slice(&a.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        self.unary(
            OpKind::Slice,
            Array::from_parts(out_shape, data),
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
        )
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor<'g, T>> {
        let a = self.value();
        if !can_broadcast(a.shape(), shape) {
            return Err(Error::Shape {
                op: OpKind::Broadcast,
                lhs: a.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let map = broadcast_index(a.shape(), shape);
        let data = map.iter().map(|&i| a.data()[i]).collect();
        self.unary(
            OpKind::Broadcast,
            Array::from_parts(shape.to_vec(), data),
            Op::Broadcast(self.id),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<'g, T>> {
        let a = self.value();
        if shape.iter().product::<usize>() != a.len() {
            return Err(Error::Shape {
                op: OpKind::Reshape,
                lhs: a.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let v = Array::from_parts(shape.to_vec(), a.data().to_vec());
        self.unary(OpKind::Reshape, v, Op::Reshape(self.id))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: &Tensor<'g, T>, beta: &Tensor<'g, T>, eps: T) -> Result<Tensor<'g, T>> {
        let x = self.value();
        let dim = *x.shape().last().unwrap_or(&0);
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [dim] || bv.shape() != [dim] {
            return Err(Error::Shape {
                op: OpKind::LayerNorm,
                lhs: x.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = x.len() / dim;
        let mut data = Vec::with_capacity(x.len());
        for r in 0..rows {
            let xs = &x.data()[r * dim..(r + 1) * dim];
            let (mean, rstd) = row_stats(xs, eps);
            for j in 0..dim {
                data.push((xs[j] - mean) * rstd * gv.data()[j] + bv.data()[j]);
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        self.graph.push(
            OpKind::LayerNorm,
            Array::from_parts(x.shape().to_vec(), data),
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                eps,
            },
            rg,
        )
    }

    /// Row lookup into a `[V, d]` table.
    pub fn embedding(&self, ids: &[usize]) -> Result<Tensor<'g, T>> {
        let t = self.value();
        if t.rank() != 2 || ids.is_empty() {
            return Err(Error::Shape {
                op: OpKind::Embedding,
                lhs: t.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!("embedding: id {bad} out of range for vocabulary {v}")));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        self.unary(
            OpKind::Embedding,
            Array::from_parts(vec![ids.len(), d], data),
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
        )
    }

    /// `out[i] = self[i, index[i]]` for a rank-2 input.
    pub fn gather(&self, index: &[usize]) -> Result<Tensor<'g, T>> {
        let a = self.value();
        if a.rank() != 2 || a.shape()[0] != index.len() || index.iter().any(|&c| c >= a.shape()[1]) {
            return Err(Error::Shape {
                op: OpKind::Gather,
                lhs: a.shape().to_vec(),
                rhs: vec![index.len()],
            });
        }
        let cols = a.shape()[1];
        let data = index
            .iter()
            .enumerate()
            .map(|(r, &c)| a.data()[r * cols + c])
            .collect();
        self.unary(
            OpKind::Gather,
            Array::from_parts(vec![index.len()], data),
            Op::Gather {
                input: self.id,
                index: index.to_vec(),
            },
        )
    }

    /// Forward value `hard`, gradient passed to `self` unchanged.
    pub fn straight_through(&self, hard: Array<T>) -> Result<Tensor<'g, T>> {
        let shape = self.shape();
        if hard.shape() != shape.as_slice() {
            return Err(Error::Shape {
                op: OpKind::StraightThrough,
                lhs: shape,
                rhs: hard.shape().to_vec(),
            });
        }
        self.unary(OpKind::StraightThrough, hard, Op::StraightThrough(self.id))
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Tensor<'g, T> {
        self.graph.push_shared(self.value(), false)
    }
}

/// Concatenates along `axis`; all other dimensions must agree.
pub fn concat<'g, T: Scalar>(parts: &[Tensor<'g, T>], axis: usize) -> Result<Tensor<'g, T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    let graph = first.graph;
    let values: Vec<_> = parts.iter().map(|t| t.value()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(Error::Shape {
            op: OpKind::Concat,
            lhs: base,
            rhs: vec![axis],
        });
    }
    let mut total = 0;
    for v in &values {
        let s = v.shape();
        let ok = s.len() == base.len()
            && s.iter().enumerate().all(|(i, &d)| i == axis || d == base[i]);
        if !ok {
            return Err(Error::Shape {
                op: OpKind::Concat,
                lhs: base,
                rhs: s.to_vec(),
            });
        }
        total += s[axis];
    }
    let (outer, _, inner) = axis_split(&base, axis);
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for v in &values {
            let len = v.shape()[axis];
            data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    let mut shape = base;
    shape[axis] = total;
    let rg = parts.iter().any(|t| t.requires_grad());
    graph.push(
        OpKind::Concat,
        Array::from_parts(shape, data),
        Op::Concat(parts.iter().map(|t| t.id).collect(), axis),
        rg,
    )
}
