//! Reverse-mode differentiation over an explicit tape of tensor operations.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its output
//! value, the ids of its inputs and whatever it needs for the gradient rule.
//! [`Tape::backward`] replays the nodes in reverse and accumulates into the
//! [`ParamStore`] the leaves were drawn from. Replay order is deterministic.

use crate::error::{Error, Result};
use crate::ops::{self, Conv2dGeom};
use crate::tensor::Tensor;

/// A learnable tensor paired with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    names: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.params.push(Param::new(value));
        self.names.push(name);
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Param)> {
        self.params
            .iter()
            .zip(&self.names)
            .enumerate()
            .map(|(i, (p, n))| (ParamId(i), n.as_str(), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Param::zero_grad);
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Adds `scale ×` every gradient of `other` into this store's gradients.
    pub fn accumulate_grads_from(&mut self, other: &ParamStore, scale: f64) {
        assert_eq!(self.params.len(), other.params.len());
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            for (d, s) in dst.grad.data_mut().iter_mut().zip(src.grad.data()) {
                *d += scale * s;
            }
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Relu(Var),
    Reshape(Var),
    Expand { x: Var, map: Vec<usize> },
    Transpose(Var),
    MatMul(Var, Var),
    Softmax { x: Var, axis: usize },
    Conv1x1 { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: Conv2dGeom },
    AvgPool(Var),
    Upsample(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Normalize { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    Project { x: Var, filters: Vec<f64> },
    WeightedNll { logits: Var, labels: Vec<usize>, weights: Vec<f64>, probs: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward pass. Not shareable across concurrent passes.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a * c);
        self.push(v, Op::Scale(x, c))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = ops::relu(self.value(x));
        self.push(v, Op::Relu(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let map = ops::expand_index(self.shape(x), shape)?;
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::Expand { x, map }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = ops::transpose_last2(self.value(x))?;
        Ok(self.push(v, Op::Transpose(x)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = ops::softmax(self.value(x), axis)?;
        Ok(self.push(v, Op::Softmax { x, axis }))
    }

    pub fn conv1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let v = ops::conv1x1(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        Ok(self.push(v, Op::Conv1x1 { x, w, b }))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: Conv2dGeom) -> Result<Var> {
        let v = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        Ok(self.push(v, Op::Conv2d { x, w, b, geom }))
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let v = ops::adaptive_avg_pool(self.value(x), out_h, out_w)?;
        Ok(self.push(v, Op::AvgPool(x)))
    }

    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let v = ops::upsample_bilinear(self.value(x), out_h, out_w)?;
        Ok(self.push(v, Op::Upsample(x)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ops::concat(&tensors, axis)?;
        Ok(self.push(v, Op::Concat { parts: parts.to_vec(), axis }))
    }

    /// Normalises each slice along the last axis, then applies scalar `gamma`, `beta`.
    pub fn normalize_last(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (g, b) = (self.scalar_of(gamma)?, self.scalar_of(beta)?);
        let (v, xhat, inv_std) = ops::normalize_last(self.value(x), g, b, eps)?;
        Ok(self.push(v, Op::Normalize { x, gamma, beta, xhat, inv_std }))
    }

    fn scalar_of(&self, v: Var) -> Result<f64> {
        let t = self.value(v);
        if t.numel() != 1 {
            return Err(Error::dim("scalar", t.shape(), &[1]));
        }
        Ok(t.data()[0])
    }

    pub fn channel_project(&mut self, x: Var, filters: Vec<f64>) -> Result<Var> {
        let v = ops::channel_project(self.value(x), &filters)?;
        Ok(self.push(v, Op::Project { x, filters }))
    }

    /// `Σ_p weights[p] · CE(logits[:, p], labels[p])` as a `[1]` tensor.
    pub fn weighted_nll(&mut self, logits: Var, labels: Vec<usize>, weights: Vec<f64>) -> Result<Var> {
        let (loss, probs) = ops::weighted_nll(self.value(logits), &labels, &weights)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedNll { logits, labels, weights, probs },
        ))
    }

    /// Propagates d(loss)/d(·) back through the tape and adds it into the gradients
    /// of every parameter leaf. `loss` must hold a single element.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.param_gradients(loss, store.len())?;
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                store.get_mut(ParamId(i)).grad.add_assign(&g);
            }
        }
        Ok(())
    }

    /// Like [`Tape::backward`] but returns per-parameter gradients (indexed by
    /// [`ParamId`]) instead of accumulating them, so the store can stay shared.
    pub fn param_gradients(&self, loss: Var, num_params: usize) -> Result<Vec<Option<Tensor>>> {
        let mut out: Vec<Option<Tensor>> = vec![None; num_params];
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::dim("backward", lv.shape(), &[1]));
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::NonFinite(format!("loss = {}", lv.data()[0])));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => match &mut out[id.0] {
                    Some(existing) => existing.add_assign(&g),
                    slot @ None => *slot = Some(g),
                },
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = ops::mul(&g, self.value(*b))?;
                    let gb = ops::mul(&g, self.value(*a))?;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(x, c) => acc(&mut grads, *x, g.map(|v| v * c)),
                Op::Sum(x) => {
                    let gx = Tensor::full(self.shape(*x), g.data()[0]);
                    acc(&mut grads, *x, gx);
                }
                Op::Relu(x) => acc(&mut grads, *x, ops::relu_backward(self.value(*x), &g)),
                Op::Reshape(x) => {
                    let gx = g.reshape(self.shape(*x))?;
                    acc(&mut grads, *x, gx);
                }
                Op::Expand { x, map } => {
                    acc(&mut grads, *x, ops::expand_backward(map, self.shape(*x), &g))
                }
                Op::Transpose(x) => acc(&mut grads, *x, ops::transpose_last2(&g)?),
                Op::MatMul(a, b) => {
                    let (ga, gb) = ops::matmul_backward(self.value(*a), self.value(*b), &g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Softmax { x, axis } => {
                    acc(&mut grads, *x, ops::softmax_backward(&node.value, &g, *axis))
                }
                Op::Conv1x1 { x, w, b } => {
                    let (gx, gw, gb) = ops::conv1x1_backward(self.value(*x), self.value(*w), &g);
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *w, gw);
                    if let Some(b) = b {
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (gx, gw, gb) =
                        ops::conv2d_backward(self.value(*x), self.value(*w), &g, *geom);
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *w, gw);
                    if let Some(b) = b {
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::AvgPool(x) => {
                    acc(&mut grads, *x, ops::adaptive_avg_pool_backward(self.shape(*x), &g))
                }
                Op::Upsample(x) => {
                    acc(&mut grads, *x, ops::upsample_bilinear_backward(self.shape(*x), &g))
                }
                Op::Concat { parts, axis } => {
                    let shapes: Vec<Vec<usize>> =
                        parts.iter().map(|&p| self.shape(p).to_vec()).collect();
                    for (p, gp) in parts.iter().zip(ops::concat_backward(&shapes, *axis, &g)) {
                        acc(&mut grads, *p, gp);
                    }
                }
                Op::Normalize { x, gamma, beta, xhat, inv_std } => {
                    let gv = self.scalar_of(*gamma)?;
                    let (gx, dgamma, dbeta) = ops::normalize_last_backward(xhat, inv_std, gv, &g);
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gamma, Tensor::full(self.shape(*gamma), dgamma));
                    acc(&mut grads, *beta, Tensor::full(self.shape(*beta), dbeta));
                }
                Op::Project { x, filters } => acc(
                    &mut grads,
                    *x,
                    ops::channel_project_backward(self.shape(*x), filters, &g),
                ),
                Op::WeightedNll { logits, labels, weights, probs } => acc(
                    &mut grads,
                    *logits,
                    ops::weighted_nll_backward(probs, labels, weights, g.data()[0]),
                ),
            }
        }
        Ok(out)
    }
}
