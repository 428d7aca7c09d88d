//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is an append-only arena: every op pushes one node whose inputs
//! are earlier nodes, so insertion order is a topological order and
//! [`Tape::backward`] simply walks it in reverse. Leaf gradients accumulate
//! across `backward` calls until [`Tape::zero_grad`].

pub mod gradcheck;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

pub use gradcheck::{finite_diff_check, finite_diff_check_sampled, GradCheckReport};

use crate::error::{Error, Result};
use crate::losses;
use crate::ops::conv::{self, Padding};
use crate::ops::norm::{self, BatchNormMode, BatchNormSaved, BatchStats};
use crate::ops::pool;
use crate::rng::RngStream;
use crate::tensor::{Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    ConvTranspose2d,
    MaxPool2d,
    Concat,
    SliceChannels,
    Relu,
    Sigmoid,
    BatchNorm,
    Dropout,
    UpsampleNearest,
    Add,
    Mul,
    Scale,
    Sum,
    DiceLoss,
    BceLoss,
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, padding: Padding, stride: usize },
    ConvTranspose2d { input: Var, weight: Var, bias: Option<Var>, stride: usize },
    MaxPool2d { input: Var, argmax: Vec<u32> },
    Concat { inputs: Vec<Var> },
    SliceChannels { input: Var, start: usize },
    Relu { input: Var },
    Sigmoid { input: Var },
    BatchNorm { input: Var, gamma: Var, beta: Var, saved: BatchNormSaved<T> },
    Dropout { input: Var, mask: Vec<T> },
    UpsampleNearest { input: Var, factor: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { input: Var, factor: T },
    Sum { input: Var },
    DiceLoss { pred: Var, target: Tensor<T> },
    BceLoss { pred: Var, target: Tensor<T> },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::Concat { .. } => OpKind::Concat,
            Op::SliceChannels { .. } => OpKind::SliceChannels,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::UpsampleNearest { .. } => OpKind::UpsampleNearest,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Sum { .. } => OpKind::Sum,
            Op::DiceLoss { .. } => OpKind::DiceLoss,
            Op::BceLoss { .. } => OpKind::BceLoss,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, weight, bias, .. } | Op::ConvTranspose2d { input, weight, bias, .. } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::Concat { inputs } => inputs.clone(),
            Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::MaxPool2d { input, .. }
            | Op::SliceChannels { input, .. }
            | Op::Relu { input }
            | Op::Sigmoid { input }
            | Op::Dropout { input, .. }
            | Op::UpsampleNearest { input, .. }
            | Op::Scale { input, .. }
            | Op::Sum { input } => vec![*input],
            Op::DiceLoss { pred, .. } | Op::BceLoss { pred, .. } => vec![*pred],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-owner gradient tape.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Registers a tensor as a graph input.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn op_inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, padding: Padding, stride: usize) -> Result<Var> {
        let y = conv::conv2d(self.value(input), self.value(weight), bias.map(|b| self.value(b)), padding, stride)?;
        Ok(self.push(y, Op::Conv2d { input, weight, bias, padding, stride }))
    }

    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let y = conv::conv_transpose2d(self.value(input), self.value(weight), bias.map(|b| self.value(b)), stride)?;
        Ok(self.push(y, Op::ConvTranspose2d { input, weight, bias, stride }))
    }

    pub fn max_pool2d(&mut self, input: Var) -> Result<Var> {
        let (y, argmax) = pool::max_pool2d(self.value(input))?;
        Ok(self.push(y, Op::MaxPool2d { input, argmax }))
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_channels needs at least one input".into()))?;
        let (n, _, h, w) = self.value(*first).dims4()?;
        let mut channels = 0;
        for &v in inputs {
            let (vn, vc, vh, vw) = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "concat_channels: non-channel extents differ ({:?} vs {:?})",
                    self.shape(*first),
                    self.shape(v)
                )));
            }
            channels += vc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * channels * plane);
        for b in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let y = Tensor::from_parts(vec![n, channels, h, w], data);
        Ok(self.push(y, Op::Concat { inputs: inputs.to_vec() }))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let y = self.value(input).slice_channels(start, len)?;
        Ok(self.push(y, Op::SliceChannels { input, start }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let y = self.value(input).map(|v| if v > T::ZERO { v } else { T::ZERO });
        self.push(y, Op::Relu { input })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let y = self.value(input).map(sigmoid);
        self.push(y, Op::Sigmoid { input })
    }

    /// Batch normalisation; returns batch statistics in train mode so the
    /// caller can update its running estimates.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (y, saved, stats) = norm::batch_norm(self.value(input), self.value(gamma), self.value(beta), mode, eps)?;
        Ok((self.push(y, Op::BatchNorm { input, gamma, beta, saved }), stats))
    }

    /// Inverted dropout. `stream = None` (inference) is the identity.
    pub fn dropout(&mut self, input: Var, rate: f64, stream: Option<&RngStream>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        let Some(stream) = stream else {
            return Ok(input);
        };
        if rate == 0.0 {
            return Ok(input);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mut rng = stream.rng();
        let mask: Vec<T> = (0..self.value(input).numel())
            .map(|_| if rng.gen::<f64>() < rate { T::ZERO } else { keep })
            .collect();
        let x = self.value(input);
        let y = Tensor::from_parts(x.shape().to_vec(), x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect());
        Ok(self.push(y, Op::Dropout { input, mask }))
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor == 1 {
            return Ok(input);
        }
        let y = pool::upsample_nearest(self.value(input), factor)?;
        Ok(self.push(y, Op::UpsampleNearest { input, factor }))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!("{what}: shapes {:?} and {:?} differ", x.shape(), y.shape())));
        }
        Ok(Tensor::from_parts(x.shape().to_vec(), x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary(a, b, "add", |p, q| p + q)?;
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary(a, b, "mul", |p, q| p * q)?;
        Ok(self.push(y, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let y = self.value(input).map(|v| v * factor);
        self.push(y, Op::Scale { input, factor })
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let y = Tensor::scalar(self.value(input).sum());
        self.push(y, Op::Sum { input })
    }

    /// `−Dice` of `pred` against a constant target; see [`crate::losses`].
    pub fn dice_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let v = losses::dice_loss_value(self.value(pred), target)?;
        Ok(self.push(Tensor::scalar(T::from_f64(v)), Op::DiceLoss { pred, target: target.clone() }))
    }

    pub fn bce_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let v = losses::bce_loss_value(self.value(pred), target)?;
        Ok(self.push(Tensor::scalar(T::from_f64(v)), Op::BceLoss { pred, target: target.clone() }))
    }

    /// Hash of every piecewise branch taken in the recorded graph (ReLU
    /// signs, pooling winners, loss clamps). Two evaluations with equal
    /// signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    for v in self.nodes[input.0].value.data() {
                        (*v > T::ZERO).hash(&mut h);
                    }
                }
                Op::MaxPool2d { argmax, .. } => argmax.hash(&mut h),
                Op::BceLoss { pred, .. } => {
                    let (lo, hi) = (losses::BCE_CLAMP, 1.0 - losses::BCE_CLAMP);
                    for v in self.nodes[pred.0].value.data() {
                        let v = v.to_f64();
                        (v < lo || v > hi).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Back-propagates from a single-element `loss`, accumulating into the
    /// gradients of every reachable leaf that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut work: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        work[loss.0] = Some(Tensor::from_parts(shape, vec![T::ONE]));
        for i in (0..=loss.0).rev() {
            let Some(dy) = work[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[i] {
                    Some(acc) => acc.add_assign(&dy)?,
                    slot @ None => *slot = Some(dy),
                }
                continue;
            }
            for (input, grad) in self.input_grads(i, &dy)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut work[input.0] {
                    Some(acc) => acc.add_assign(&grad)?,
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, dy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { input, weight, bias, padding, stride } => {
                let (dx, dw, db) = conv::conv2d_backward(val(*input), val(*weight), *padding, *stride, dy)?;
                let mut g = vec![(*input, dx), (*weight, dw)];
                if let Some(b) = bias {
                    g.push((*b, db));
                }
                g
            }
            Op::ConvTranspose2d { input, weight, bias, stride } => {
                let (dx, dw, db) = conv::conv_transpose2d_backward(val(*input), val(*weight), *stride, dy)?;
                let mut g = vec![(*input, dx), (*weight, dw)];
                if let Some(b) = bias {
                    g.push((*b, db));
                }
                g
            }
            Op::MaxPool2d { input, argmax } => {
                vec![(*input, pool::max_pool2d_backward(val(*input).shape(), argmax, dy))]
            }
            Op::Concat { inputs } => {
                let mut start = 0;
                let mut g = Vec::with_capacity(inputs.len());
                for &v in inputs {
                    let c = val(v).shape()[1];
                    g.push((v, dy.slice_channels(start, c)?));
                    start += c;
                }
                g
            }
            Op::SliceChannels { input, start } => {
                let x = val(*input);
                let (n, c, h, w) = x.dims4()?;
                let len = dy.shape()[1];
                let plane = h * w;
                let mut dx = vec![T::ZERO; x.numel()];
                for b in 0..n {
                    let dst = (b * c + start) * plane;
                    let src = b * len * plane;
                    dx[dst..dst + len * plane].copy_from_slice(&dy.data()[src..src + len * plane]);
                }
                vec![(*input, Tensor::from_parts(x.shape().to_vec(), dx))]
            }
            Op::Relu { input } => {
                let x = val(*input);
                let dx = x.data().iter().zip(dy.data()).map(|(&v, &g)| if v > T::ZERO { g } else { T::ZERO });
                vec![(*input, Tensor::from_parts(x.shape().to_vec(), dx.collect()))]
            }
            Op::Sigmoid { input } => {
                let y = &node.value;
                let dx = y.data().iter().zip(dy.data()).map(|(&s, &g)| g * s * (T::ONE - s));
                vec![(*input, Tensor::from_parts(y.shape().to_vec(), dx.collect()))]
            }
            Op::BatchNorm { input, gamma, beta, saved } => {
                let (dx, dg, db) = norm::batch_norm_backward(val(*input).shape(), val(*gamma), saved, dy);
                vec![(*input, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Dropout { input, mask } => {
                let dx = dy.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                vec![(*input, Tensor::from_parts(dy.shape().to_vec(), dx))]
            }
            Op::UpsampleNearest { input, factor } => {
                vec![(*input, pool::upsample_nearest_backward(val(*input).shape(), *factor, dy))]
            }
            Op::Add { a, b } => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::Mul { a, b } => {
                let (x, y) = (val(*a), val(*b));
                let da = dy.data().iter().zip(y.data()).map(|(&g, &q)| g * q).collect();
                let db = dy.data().iter().zip(x.data()).map(|(&g, &p)| g * p).collect();
                vec![
                    (*a, Tensor::from_parts(x.shape().to_vec(), da)),
                    (*b, Tensor::from_parts(y.shape().to_vec(), db)),
                ]
            }
            Op::Scale { input, factor } => vec![(*input, dy.map(|g| g * *factor))],
            Op::Sum { input } => {
                let g = dy.data()[0];
                vec![(*input, Tensor::from_parts(val(*input).shape().to_vec(), vec![g; val(*input).numel()]))]
            }
            Op::DiceLoss { pred, target } => {
                let g = dy.data()[0];
                vec![(*pred, losses::dice_loss_grad(val(*pred), target).map(|v| v * g))]
            }
            Op::BceLoss { pred, target } => {
                let g = dy.data()[0];
                vec![(*pred, losses::bce_loss_grad(val(*pred), target).map(|v| v * g))]
            }
        };
        Ok(out)
    }
}

#[inline]
pub fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_sum_of_squares_is_twice_x() {
        let mut tape = Tape::new();
        let data = [1.0, -2.0, 3.5];
        let x = tape.leaf(t(&[3], &data), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        let expect: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.grad(x).unwrap().data(), &expect[..]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 2.0, 0.0]), true);
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 2.0, 0.0]);
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).data()[2], 0.5);
        assert!(tape.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn concat_then_slice_round_trips_bitwise() {
        let mut tape = Tape::<f32>::new();
        let a = Tensor::new(vec![1, 2, 2, 2], (0..8).map(|i| i as f32 * 0.1).collect()).unwrap();
        let b = Tensor::new(vec![1, 3, 2, 2], (0..12).map(|i| -(i as f32) / 7.0).collect()).unwrap();
        let va = tape.constant(a.clone());
        let vb = tape.constant(b.clone());
        let c = tape.concat_channels(&[va, vb]).unwrap();
        assert_eq!(tape.shape(c), &[1, 5, 2, 2]);
        let sa = tape.slice_channels(c, 0, 2).unwrap();
        let sb = tape.slice_channels(c, 2, 3).unwrap();
        assert_eq!(tape.value(sa), &a);
        assert_eq!(tape.value(sb), &b);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(vec![1, 1, 2, 2]).unwrap());
        let b = tape.constant(Tensor::zeros(vec![1, 1, 4, 2]).unwrap());
        assert!(tape.concat_channels(&[a, b]).is_err());
    }

    #[test]
    fn dropout_modes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(vec![1000], 1.0).unwrap(), true);
        let stream = RngStream::new(1);
        assert_eq!(tape.dropout(x, 0.0, Some(&stream)).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.9, None).unwrap(), x);
        assert!(tape.dropout(x, 1.0, Some(&stream)).is_err());
        let d = tape.dropout(x, 0.5, Some(&stream)).unwrap();
        assert!(tape.value(d).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn dropout_survivor_fraction() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(vec![1_000_000], 1.0).unwrap());
        let d = tape.dropout(x, 0.5, Some(&RngStream::new(99))).unwrap();
        let kept = tape.value(d).data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e6;
        assert!((kept - 0.5).abs() < 0.01, "{kept}");
    }

    #[test]
    fn branch_signature_tracks_relu_flips() {
        let sig = |v: f64| {
            let mut tape = Tape::new();
            let x = tape.leaf(t(&[2], &[v, 1.0]), true);
            let _ = tape.relu(x);
            tape.branch_signature()
        };
        assert_eq!(sig(0.5), sig(0.7));
        assert_ne!(sig(0.5), sig(-0.5));
    }
}
