//! Two executors for the same network code: [`Eager`] computes values only
//! and drops intermediates as soon as they are unreferenced; [`Tape`] records
//! every operation for reverse-mode differentiation.

use std::rc::Rc;

use crate::error::Result;
use crate::ops;
use crate::params::{BnIds, BnUpdate, ParamId, ParamStore, BN_EPS};
use crate::scalar::Scalar;
use crate::tensor::{Shape5, Tensor};

pub trait Graph<T: Scalar> {
    type Var: Clone;

    fn params(&self) -> &ParamStore<T>;
    /// Whether batch normalization uses batch statistics.
    fn training(&self) -> bool;
    fn input(&mut self, t: Tensor<T>) -> Self::Var;
    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor<T>;

    fn shape(&self, v: &Self::Var) -> Shape5 {
        self.value(v).shape()
    }

    fn conv3(&mut self, x: &Self::Var, w: ParamId, b: ParamId) -> Result<Self::Var>;
    fn conv1(&mut self, x: &Self::Var, w: ParamId, b: ParamId) -> Result<Self::Var>;
    fn conv_t2(&mut self, x: &Self::Var, w: ParamId, b: ParamId) -> Result<Self::Var>;
    fn batch_norm(&mut self, x: &Self::Var, bn: BnIds) -> Self::Var;
    fn relu(&mut self, x: &Self::Var) -> Self::Var;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn scale(&mut self, x: &Self::Var, s: f64) -> Self::Var;
    fn maxpool2(&mut self, x: &Self::Var) -> Self::Var;
    fn concat(&mut self, xs: &[Self::Var]) -> Result<Self::Var>;
    fn crop(&mut self, x: &Self::Var, y0: usize, x0: usize, hh: usize, ww: usize) -> Result<Self::Var>;
    fn resize(&mut self, x: &Self::Var, size: [usize; 3]) -> Result<Self::Var>;
    fn softmax(&mut self, x: &Self::Var) -> Self::Var;
}

fn bn_forward<T: Scalar>(
    params: &ParamStore<T>,
    training: bool,
    x: &Tensor<T>,
    bn: BnIds,
    updates: &mut Vec<BnUpdate>,
) -> (Tensor<T>, ops::BnCache) {
    let (gamma, beta) = (params.get(bn.gamma), params.get(bn.beta));
    if training {
        let f = ops::bn_forward_train(x, gamma, beta, BN_EPS);
        updates.push(BnUpdate {
            ids: bn,
            mean: f.cache.mean.clone(),
            var_unbiased: f.var_unbiased,
        });
        (f.y, f.cache)
    } else {
        ops::bn_forward_eval(
            x,
            gamma,
            beta,
            params.get(bn.running_mean),
            params.get(bn.running_var),
            BN_EPS,
        )
    }
}

/// Value-only executor.
pub struct Eager<'p, T> {
    params: &'p ParamStore<T>,
    training: bool,
    bn_updates: Vec<BnUpdate>,
}

impl<'p, T: Scalar> Eager<'p, T> {
    pub fn new(params: &'p ParamStore<T>, training: bool) -> Self {
        Self {
            params,
            training,
            bn_updates: Vec::new(),
        }
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }
}

impl<T: Scalar> Graph<T> for Eager<'_, T> {
    type Var = Rc<Tensor<T>>;

    fn params(&self) -> &ParamStore<T> {
        self.params
    }

    fn training(&self) -> bool {
        self.training
    }

    fn input(&mut self, t: Tensor<T>) -> Self::Var {
        Rc::new(t)
    }

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor<T> {
        v
    }

    fn conv3(&mut self, x: &Self::Var, w: ParamId, b: ParamId) -> Result<Self::Var> {
        Ok(Rc::new(ops::conv3_forward(x, self.params.get(w), self.params.get(b))?))
    }

    fn conv1(&mut self, x: &Self::Var, w: ParamId, b: ParamId) -> Result<Self::Var> {
        Ok(Rc::new(ops::conv1_forward(x, self.params.get(w), self.params.get(b))?))
    }

    fn conv_t2(&mut self, x: &Self::Var, w: ParamId, b: ParamId) -> Result<Self::Var> {
        Ok(Rc::new(ops::conv_t2_forward(x, self.params.get(w), self.params.get(b))?))
    }

    fn batch_norm(&mut self, x: &Self::Var, bn: BnIds) -> Self::Var {
        Rc::new(bn_forward(self.params, self.training, x, bn, &mut self.bn_updates).0)
    }

    fn relu(&mut self, x: &Self::Var) -> Self::Var {
        Rc::new(ops::relu_forward(x))
    }

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        Ok(Rc::new(ops::add_forward(a, b)?))
    }

    fn scale(&mut self, x: &Self::Var, s: f64) -> Self::Var {
        let s = T::of(s);
        Rc::new(x.map(|v| v * s))
    }

    fn maxpool2(&mut self, x: &Self::Var) -> Self::Var {
        Rc::new(ops::maxpool2_forward(x).0)
    }

    fn concat(&mut self, xs: &[Self::Var]) -> Result<Self::Var> {
        let refs: Vec<&Tensor<T>> = xs.iter().map(|v| v.as_ref()).collect();
        Ok(Rc::new(ops::concat_forward(&refs)?))
    }

    fn crop(&mut self, x: &Self::Var, y0: usize, x0: usize, hh: usize, ww: usize) -> Result<Self::Var> {
        Ok(Rc::new(ops::crop_forward(x, y0, x0, hh, ww)?))
    }

    fn resize(&mut self, x: &Self::Var, size: [usize; 3]) -> Result<Self::Var> {
        if x.spatial() == size {
            return Ok(x.clone());
        }
        Ok(Rc::new(ops::resize_forward(x, size)?))
    }

    fn softmax(&mut self, x: &Self::Var) -> Self::Var {
        Rc::new(ops::softmax_forward(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum TapeOp {
    Input,
    Conv3 { x: NodeId, w: ParamId, b: ParamId },
    Conv1 { x: NodeId, w: ParamId, b: ParamId },
    ConvT2 { x: NodeId, w: ParamId, b: ParamId },
    BatchNorm { x: NodeId, bn: BnIds, cache: ops::BnCache },
    Relu { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Scale { x: NodeId, s: f64 },
    MaxPool { x: NodeId, arg: Vec<u32> },
    Concat { xs: Vec<NodeId> },
    Crop { x: NodeId, y0: usize, x0: usize },
    Resize { x: NodeId },
    Softmax { x: NodeId },
    /// Gradient of the loss with respect to `logits`, computed in the forward pass.
    Loss { logits: NodeId, grad: Tensor<f64> },
}

struct Node<T> {
    value: Tensor<T>,
    op: TapeOp,
    requires_grad: bool,
}

/// Reverse-mode recorder.
pub struct Tape<'p, T> {
    params: &'p ParamStore<T>,
    training: bool,
    nodes: Vec<Node<T>>,
    bn_updates: Vec<BnUpdate>,
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>, training: bool) -> Self {
        Self {
            params,
            training,
            nodes: Vec::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    fn push(&mut self, value: Tensor<T>, op: TapeOp, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Weighted cross-entropy of `logits` against `labels`; a scalar node.
    pub fn weighted_ce(&mut self, logits: NodeId, labels: &[u8], weights: &[f64]) -> Result<NodeId> {
        let (loss, grad) = ops::weighted_ce(&self.nodes[logits.0].value, labels, weights)?;
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(T::of(loss)), TapeOp::Loss { logits, grad: grad.cast() }, rg))
    }

    /// Gradients of the scalar `root` with respect to every parameter, aligned
    /// with the parameter store (buffers receive zeros).
    pub fn backward(&self, root: NodeId) -> Vec<Tensor<T>> {
        let mut pgrads = self.params.zeros_like();
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), T::one()));
        let acc = |grads: &mut Vec<Option<Tensor<T>>>, id: NodeId, g: Tensor<T>| match &mut grads[id.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                TapeOp::Input => {}
                TapeOp::Conv3 { x, w, b } | TapeOp::Conv1 { x, w, b } | TapeOp::ConvT2 { x, w, b } => {
                    let xv = &self.nodes[x.0].value;
                    let wv = self.params.get(*w);
                    let need = self.rg(*x);
                    let g = match node.op {
                        TapeOp::Conv3 { .. } => ops::conv3_backward(xv, wv, &dy, need),
                        TapeOp::Conv1 { .. } => ops::conv1_backward(xv, wv, &dy, need),
                        _ => ops::conv_t2_backward(xv, wv, &dy, need),
                    };
                    pgrads[w.0].add_assign(&g.dw);
                    pgrads[b.0].add_assign(&g.db);
                    if let Some(dx) = g.dx {
                        acc(&mut grads, *x, dx);
                    }
                }
                TapeOp::BatchNorm { x, bn, cache } => {
                    let g = ops::bn_backward(&self.nodes[x.0].value, self.params.get(bn.gamma), &dy, cache);
                    pgrads[bn.gamma.0].add_assign(&g.dgamma);
                    pgrads[bn.beta.0].add_assign(&g.dbeta);
                    if self.rg(*x) {
                        acc(&mut grads, *x, g.dx);
                    }
                }
                TapeOp::Relu { x } => {
                    if self.rg(*x) {
                        acc(&mut grads, *x, ops::relu_backward(&node.value, &dy));
                    }
                }
                TapeOp::Add { a, b } => {
                    if self.rg(*b) {
                        acc(&mut grads, *b, dy.clone());
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, dy);
                    }
                }
                TapeOp::Scale { x, s } => {
                    if self.rg(*x) {
                        let s = T::of(*s);
                        acc(&mut grads, *x, dy.map(|v| v * s));
                    }
                }
                TapeOp::MaxPool { x, arg } => {
                    if self.rg(*x) {
                        acc(&mut grads, *x, ops::maxpool2_backward(self.nodes[x.0].value.shape(), arg, &dy));
                    }
                }
                TapeOp::Concat { xs } => {
                    let channels: Vec<usize> = xs.iter().map(|x| self.nodes[x.0].value.c()).collect();
                    for (x, g) in xs.iter().zip(ops::concat_backward(&channels, &dy)) {
                        if self.rg(*x) {
                            acc(&mut grads, *x, g);
                        }
                    }
                }
                TapeOp::Crop { x, y0, x0 } => {
                    if self.rg(*x) {
                        acc(&mut grads, *x, ops::crop_backward(self.nodes[x.0].value.shape(), *y0, *x0, &dy));
                    }
                }
                TapeOp::Resize { x } => {
                    if self.rg(*x) {
                        acc(&mut grads, *x, ops::resize_backward(self.nodes[x.0].value.shape(), &dy));
                    }
                }
                TapeOp::Softmax { x } => {
                    if self.rg(*x) {
                        acc(&mut grads, *x, ops::softmax_backward(&node.value, &dy));
                    }
                }
                TapeOp::Loss { logits, grad } => {
                    if self.rg(*logits) {
                        let s = dy.item().f64();
                        let g = Tensor::from_vec(grad.shape(), grad.data().iter().map(|&v| T::of(v * s)).collect());
                        acc(&mut grads, *logits, g);
                    }
                }
            }
        }
        pgrads
    }
}

impl<T: Scalar> Graph<T> for Tape<'_, T> {
    type Var = NodeId;

    fn params(&self) -> &ParamStore<T> {
        self.params
    }

    fn training(&self) -> bool {
        self.training
    }

    fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, TapeOp::Input, false)
    }

    fn value<'a>(&'a self, v: &'a NodeId) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    fn conv3(&mut self, x: &NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
        let y = ops::conv3_forward(&self.nodes[x.0].value, self.params.get(w), self.params.get(b))?;
        Ok(self.push(y, TapeOp::Conv3 { x: *x, w, b }, true))
    }

    fn conv1(&mut self, x: &NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
        let y = ops::conv1_forward(&self.nodes[x.0].value, self.params.get(w), self.params.get(b))?;
        Ok(self.push(y, TapeOp::Conv1 { x: *x, w, b }, true))
    }

    fn conv_t2(&mut self, x: &NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
        let y = ops::conv_t2_forward(&self.nodes[x.0].value, self.params.get(w), self.params.get(b))?;
        Ok(self.push(y, TapeOp::ConvT2 { x: *x, w, b }, true))
    }

    fn batch_norm(&mut self, x: &NodeId, bn: BnIds) -> NodeId {
        let (y, cache) = bn_forward(self.params, self.training, &self.nodes[x.0].value, bn, &mut self.bn_updates);
        self.push(y, TapeOp::BatchNorm { x: *x, bn, cache }, true)
    }

    fn relu(&mut self, x: &NodeId) -> NodeId {
        let y = ops::relu_forward(&self.nodes[x.0].value);
        let rg = self.rg(*x);
        self.push(y, TapeOp::Relu { x: *x }, rg)
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let y = ops::add_forward(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        let rg = self.rg(*a) || self.rg(*b);
        Ok(self.push(y, TapeOp::Add { a: *a, b: *b }, rg))
    }

    fn scale(&mut self, x: &NodeId, s: f64) -> NodeId {
        let st = T::of(s);
        let y = self.nodes[x.0].value.map(|v| v * st);
        let rg = self.rg(*x);
        self.push(y, TapeOp::Scale { x: *x, s }, rg)
    }

    fn maxpool2(&mut self, x: &NodeId) -> NodeId {
        let (y, arg) = ops::maxpool2_forward(&self.nodes[x.0].value);
        let rg = self.rg(*x);
        self.push(y, TapeOp::MaxPool { x: *x, arg }, rg)
    }

    fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let refs: Vec<&Tensor<T>> = xs.iter().map(|x| &self.nodes[x.0].value).collect();
        let y = ops::concat_forward(&refs)?;
        let rg = xs.iter().any(|x| self.rg(*x));
        Ok(self.push(y, TapeOp::Concat { xs: xs.to_vec() }, rg))
    }

    fn crop(&mut self, x: &NodeId, y0: usize, x0: usize, hh: usize, ww: usize) -> Result<NodeId> {
        let y = ops::crop_forward(&self.nodes[x.0].value, y0, x0, hh, ww)?;
        let rg = self.rg(*x);
        Ok(self.push(y, TapeOp::Crop { x: *x, y0, x0 }, rg))
    }

    fn resize(&mut self, x: &NodeId, size: [usize; 3]) -> Result<NodeId> {
        if self.nodes[x.0].value.spatial() == size {
            return Ok(*x);
        }
        let y = ops::resize_forward(&self.nodes[x.0].value, size)?;
        let rg = self.rg(*x);
        Ok(self.push(y, TapeOp::Resize { x: *x }, rg))
    }

    fn softmax(&mut self, x: &NodeId) -> NodeId {
        let y = ops::softmax_forward(&self.nodes[x.0].value);
        let rg = self.rg(*x);
        self.push(y, TapeOp::Softmax { x: *x }, rg)
    }
}
