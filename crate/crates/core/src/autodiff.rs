//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! Every op appends a node holding its output value and whatever it needs for
//! the backward pass; inputs always precede the node that consumes them, so a
//! single reverse sweep visits each node once.

use crate::error::{Error, Result};
use crate::ops::{self, BatchStats, ConvGeom, PoolGeom};
use crate::tensor::{Scalar, Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_mode: bool,
    },
    Relu(Var),
    Add(Var, Var),
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u8>,
        ignore: Option<u8>,
        count: usize,
    },
    GumbelSoftmax {
        logits: Var,
        tau: T,
    },
    WeightedSum {
        inputs: Vec<Var>,
        weights: Var,
    },
    Sum(Var),
    Dot {
        input: Var,
        other: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// How a batch-norm node obtains its normalization statistics.
pub enum BnMode<'a, T> {
    /// Batch statistics over (N, H, W); differentiable through the statistics.
    Train,
    /// Fixed running statistics.
    Infer { mean: &'a [T], var: &'a [T] },
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients are reported for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let y = ops::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            geom,
        )?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(y, Op::Conv2d { input, weight, bias, geom }, &inputs))
    }

    /// Batch normalization. In [`BnMode::Train`] the batch statistics used are
    /// returned so the caller can update running estimates.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats>)> {
        if !(eps >= T::zero()) {
            return Err(Error::InvalidArgument(format!("batchnorm epsilon must be >= 0, got {eps}")));
        }
        let x = self.value(input);
        let c = x.shape().c();
        let (mean, inv_std, stats, batch_mode) = match mode {
            BnMode::Train => {
                if eps <= T::zero() {
                    return Err(Error::InvalidArgument(
                        "batchnorm epsilon must be > 0 in training mode".into(),
                    ));
                }
                let st = ops::batch_stats(x)?;
                let mean: Vec<T> = st.mean.iter().map(|&m| T::of(m)).collect();
                let var: Vec<T> = st.var.iter().map(|&v| T::of(v)).collect();
                (mean, ops::inv_std(&var, eps), Some(st), true)
            }
            BnMode::Infer { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Shape(format!(
                        "batchnorm2d: running stats have {}/{} elements, input has C={c}",
                        mean.len(),
                        var.len()
                    )));
                }
                (mean.to_vec(), ops::inv_std(var, eps), None, false)
            }
        };
        let y = ops::bn_apply(x, self.value(gamma), self.value(beta), &mean, &inv_std)?;
        let v = self.push(
            y,
            Op::BatchNorm { input, gamma, beta, mean, inv_std, batch_mode },
            &[input, gamma, beta],
        );
        Ok((v, stats))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let y = ops::relu(self.value(input));
        self.push(y, Op::Relu(input), &[input])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn max_pool2d(&mut self, input: Var, geom: PoolGeom) -> Result<Var> {
        let (y, argmax) = ops::max_pool2d(self.value(input), geom)?;
        Ok(self.push(y, Op::MaxPool { input, argmax }, &[input]))
    }

    pub fn upsample_bilinear(&mut self, input: Var, factor: usize) -> Result<Var> {
        let y = ops::upsample_bilinear(self.value(input), factor)?;
        Ok(self.push(y, Op::Upsample { input, factor }, &[input]))
    }

    /// Pixel-mean cross-entropy; `targets` is the (N, H, W) label map.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[u8], ignore: Option<u8>) -> Result<Var> {
        let (loss, count) = ops::softmax_cross_entropy(self.value(logits), targets, ignore)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                count,
            },
            &[logits],
        ))
    }

    /// `softmax((logits + noise) / tau)` for a `(N, 1, 1, 1)` logit vector;
    /// the noise is a constant, so gradients flow to the logits only.
    pub fn gumbel_softmax(&mut self, logits: Var, noise: &[T], tau: T) -> Result<Var> {
        let z = ops::gumbel_softmax(self.value(logits).data(), noise, tau)?;
        Ok(self.push(Tensor::vector(z), Op::GumbelSoftmax { logits, tau }, &[logits]))
    }

    /// `sum_i weights[i] · inputs[i]`, accumulated in index order.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: Var) -> Result<Var> {
        let w = self.value(weights).data().to_vec();
        if w.len() != inputs.len() || inputs.is_empty() {
            return Err(Error::Shape(format!(
                "weighted sum: {} weights for {} inputs",
                w.len(),
                inputs.len()
            )));
        }
        let shape = self.value(inputs[0]).shape();
        let mut out = Tensor::zeros(shape);
        for (i, (&x, &wi)) in inputs.iter().zip(&w).enumerate() {
            let xv = self.value(x);
            if xv.shape() != shape {
                return Err(Error::Shape(format!(
                    "weighted sum: input {i} has shape {}, expected {shape}",
                    xv.shape()
                )));
            }
            let od = out.data_mut();
            if i == 0 {
                od.iter_mut().zip(xv.data()).for_each(|(o, &v)| *o = wi * v);
            } else {
                od.iter_mut().zip(xv.data()).for_each(|(o, &v)| *o += wi * v);
            }
        }
        let mut deps = inputs.to_vec();
        deps.push(weights);
        Ok(self.push(out, Op::WeightedSum { inputs: inputs.to_vec(), weights }, &deps))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).sum();
        self.push(Tensor::scalar(s), Op::Sum(input), &[input])
    }

    /// `sum(input ⊙ other)` with `other` a constant.
    pub fn dot(&mut self, input: Var, other: &Tensor<T>) -> Result<Var> {
        let x = self.value(input);
        if x.shape() != other.shape() {
            return Err(Error::Shape(format!("dot: shape {} vs {}", x.shape(), other.shape())));
        }
        let s = x.data().iter().zip(other.data()).map(|(&a, &b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot { input, other: other.clone() }, &[input]))
    }

    /// Runs the reverse sweep from a scalar `loss`. The tape can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Autodiff(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        let loss_shape = self.value(loss).shape();
        if loss_shape.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {loss_shape}"
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(loss_shape, T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            let nodes = &self.nodes;
            let val = |v: Var| &nodes[v.0].value;
            let wants = |v: Var| nodes[v.0].requires_grad;
            let mut acc = |v: Var, g: Tensor<T>| accumulate(&mut grads, v, g);
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { input, weight, bias, geom } => {
                    let g = ops::conv2d_backward(
                        val(*input),
                        val(*weight),
                        *geom,
                        &dy,
                        (wants(*input), wants(*weight), bias.is_some_and(wants)),
                    )?;
                    if let Some(dx) = g.input {
                        acc(*input, dx);
                    }
                    if let Some(dw) = g.weight {
                        acc(*weight, dw);
                    }
                    if let (Some(b), Some(db)) = (bias, g.bias) {
                        acc(*b, db);
                    }
                }
                Op::BatchNorm { input, gamma, beta, mean, inv_std, batch_mode } => {
                    let g = ops::bn_backward(val(*input), val(*gamma), mean, inv_std, &dy, *batch_mode);
                    if wants(*input) {
                        acc(*input, g.input);
                    }
                    if wants(*gamma) {
                        acc(*gamma, g.gamma.reshape(val(*gamma).shape())?);
                    }
                    if wants(*beta) {
                        acc(*beta, g.beta.reshape(val(*beta).shape())?);
                    }
                }
                Op::Relu(input) => {
                    let mut dx = dy;
                    dx.data_mut()
                        .iter_mut()
                        .zip(node.value.data())
                        .for_each(|(g, &y)| {
                            if y <= T::zero() {
                                *g = T::zero();
                            }
                        });
                    acc(*input, dx);
                }
                Op::Add(a, b) => {
                    if wants(*a) {
                        acc(*a, dy.clone());
                    }
                    if wants(*b) {
                        acc(*b, dy);
                    }
                }
                Op::MaxPool { input, argmax } => {
                    acc(*input, ops::max_pool2d_backward(val(*input).shape(), argmax, &dy));
                }
                Op::Upsample { input, factor } => {
                    acc(*input, ops::upsample_bilinear_backward(val(*input).shape(), *factor, &dy));
                }
                Op::CrossEntropy { logits, targets, ignore, count } => {
                    let g = ops::softmax_cross_entropy_backward(val(*logits), targets, *ignore, *count, dy.item());
                    acc(*logits, g);
                }
                Op::GumbelSoftmax { logits, tau } => {
                    let z = node.value.data();
                    let dz = dy.data();
                    let inner: T = z.iter().zip(dz).map(|(&a, &b)| a * b).sum();
                    let g: Vec<T> = z.iter().zip(dz).map(|(&zi, &gi)| zi * (gi - inner) / *tau).collect();
                    acc(*logits, Tensor::from_vec(val(*logits).shape(), g)?);
                }
                Op::WeightedSum { inputs, weights } => {
                    let w = val(*weights).data().to_vec();
                    let mut dw = vec![T::zero(); w.len()];
                    for (i, &x) in inputs.iter().enumerate() {
                        dw[i] = val(x).data().iter().zip(dy.data()).map(|(&a, &b)| a * b).sum();
                    }
                    for (i, &x) in inputs.iter().enumerate() {
                        if wants(x) {
                            acc(x, dy.map(|g| g * w[i]));
                        }
                    }
                    if wants(*weights) {
                        acc(*weights, Tensor::from_vec(val(*weights).shape(), dw)?);
                    }
                }
                Op::Sum(input) => {
                    acc(*input, Tensor::full(val(*input).shape(), dy.item()));
                }
                Op::Dot { input, other } => {
                    let s = dy.item();
                    acc(*input, other.map(|v| v * s));
                }
            }
        }

        // keep leaf gradients only
        for (i, g) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of the swept loss with respect to `requires_grad` leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, or zeros of `shape` when the loss did not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: Shape) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
