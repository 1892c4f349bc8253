use std::sync::Arc;

use super::kernels::{
    self, batch_stats, bilinear_upsample2_backward, channel_affine, channel_view, conv2d_backward,
};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fixed linear map `y = A·x` over flat buffers, differentiated through its
/// transpose.
pub trait LinearMap<T>: Send + Sync {
    fn in_len(&self) -> usize;
    fn out_shape(&self) -> Vec<usize>;
    fn apply(&self, x: &[T], y: &mut [T]);
    /// `dx += Aᵀ·dy`
    fn apply_transpose(&self, dy: &[T], dx: &mut [T]);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Running per-channel mean and (biased) variance.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

/// Target of a Dice loss.
#[derive(Debug, Clone)]
pub enum DiceTarget {
    /// Foreground indicator per pixel, laid out `[B, H, W]`; logits are `[B, 1, H, W]`.
    Binary(Vec<u8>),
    /// Class index per pixel, laid out `[B, H, W]`; logits are `[B, C, H, W]`.
    Classes(Vec<u8>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GroupReduce {
    Max,
    Mean,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        padding: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2 {
        x: Var,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Reshape {
        x: Var,
    },
    Linear {
        x: Var,
        map: Arc<dyn LinearMap<T>>,
    },
    GroupReduce {
        x: Var,
        reduce: GroupReduce,
        argmax: Vec<usize>,
    },
    Sum {
        x: Var,
    },
    Dot {
        x: Var,
        weights: Tensor<T>,
    },
    Dice {
        logits: Var,
        dlogits: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of a forward pass. Nodes are appended in evaluation order,
/// so the node list is already a topological order.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, padding: usize) -> Result<Var> {
        let y = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), padding)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", y, Op::Conv2d { x, w, b, padding }, &inputs)
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = kernels::maxpool2(self.value(x))?;
        self.push("maxpool2", y, Op::MaxPool2 { x, argmax }, &[x])
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let y = kernels::bilinear_upsample2(self.value(x))?;
        self.push("bilinear_upsample2", y, Op::Upsample2 { x }, &[x])
    }

    /// Batch normalization over every axis except axis 1. In train mode the
    /// batch moments normalize the input and the updated running statistics
    /// are returned; in eval mode `running` is used as-is.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats<T>,
        mode: BatchNormMode,
        eps: f64,
        momentum: f64,
    ) -> Result<(Var, Option<RunningStats<T>>)> {
        let eps = T::from_f64(eps);
        let (mean, var, batch) = match mode {
            BatchNormMode::Train => {
                let s = batch_stats(self.value(x))?;
                (s.mean, s.var, true)
            }
            BatchNormMode::Eval => (running.mean.clone(), running.var.clone(), false),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = channel_affine(
            self.value(x),
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        )?;
        let updated = batch.then(|| {
            let m = T::from_f64(momentum);
            let keep = T::one() - m;
            RunningStats {
                mean: running.mean.iter().zip(&mean).map(|(&r, &b)| keep * r + m * b).collect(),
                var: running.var.iter().zip(&var).map(|(&r, &b)| keep * r + m * b).collect(),
            }
        });
        let op = Op::ChannelAffine {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats: batch,
        };
        let v = self.push("batchnorm", y, op, &[x, gamma, beta])?;
        Ok((v, updated))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", y, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(sigmoid);
        self.push("sigmoid", y, Op::Sigmoid { x }, &[x])
    }

    /// Softmax across axis 1 of a `[B, C, ...]` tensor.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let y = softmax_channels(self.value(x))?;
        self.push("softmax_channels", y, Op::Softmax { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let mut y = va.clone();
        y.add_assign(vb);
        self.push("add", y, Op::Add { a, b }, &[a, b])
    }

    /// Concatenate along axis 1; all other axes must agree.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape("concat_channels", format!("{sa:?} vs {sb:?}")));
        }
        let batch = sa[0];
        let (ra, rb) = (va.len() / batch, vb.len() / batch);
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for n in 0..batch {
            data.extend_from_slice(&va.data()[n * ra..(n + 1) * ra]);
            data.extend_from_slice(&vb.data()[n * rb..(n + 1) * rb]);
        }
        let mut shape = sa.to_vec();
        shape[1] += sb[1];
        let y = Tensor::from_vec(shape, data)?;
        self.push("concat_channels", y, Op::Concat { a, b }, &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        self.push("reshape", y, Op::Reshape { x }, &[x])
    }

    pub fn linear_map(&mut self, x: Var, map: Arc<dyn LinearMap<T>>) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != map.in_len() {
            return Err(Error::shape("linear_map", format!("input has {} values, map expects {}", xv.len(), map.in_len())));
        }
        let mut y = Tensor::zeros(map.out_shape());
        map.apply(xv.data(), y.data_mut());
        self.push("linear_map", y, Op::Linear { x, map }, &[x])
    }

    /// Maximum over axis 2 of a `[B, C, G, ...]` tensor.
    pub fn group_max(&mut self, x: Var) -> Result<Var> {
        self.group_reduce(x, GroupReduce::Max)
    }

    /// Mean over axis 2 of a `[B, C, G, ...]` tensor.
    pub fn group_mean(&mut self, x: Var) -> Result<Var> {
        self.group_reduce(x, GroupReduce::Mean)
    }

    fn group_reduce(&mut self, x: Var, reduce: GroupReduce) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() < 3 || s[2] == 0 {
            return Err(Error::shape("group_pool", format!("expected [B, C, G, ...], got {s:?}")));
        }
        let (outer, g) = (s[0] * s[1], s[2]);
        let inner: usize = s[3..].iter().product();
        let mut out_shape = s[..2].to_vec();
        out_shape.extend_from_slice(&s[3..]);
        let mut y = Tensor::zeros(out_shape);
        let mut argmax = Vec::new();
        let xd = xv.data();
        match reduce {
            GroupReduce::Max => {
                argmax = vec![0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = o * g * inner + i;
                        for e in 1..g {
                            let idx = (o * g + e) * inner + i;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                        y.data_mut()[o * inner + i] = xd[best];
                        argmax[o * inner + i] = best;
                    }
                }
            }
            GroupReduce::Mean => {
                let scale = T::one() / T::from_f64(g as f64);
                for o in 0..outer {
                    for e in 0..g {
                        for i in 0..inner {
                            y.data_mut()[o * inner + i] += xd[(o * g + e) * inner + i] * scale;
                        }
                    }
                }
            }
        }
        self.push("group_pool", y, Op::GroupReduce { x, reduce, argmax }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        self.push("sum", y, Op::Sum { x }, &[x])
    }

    /// `Σ x·weights` for a constant weight tensor of the same shape.
    pub fn dot(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(Error::shape("dot", format!("{:?} vs {:?}", xv.shape(), weights.shape())));
        }
        let s: T = xv.data().iter().zip(weights.data()).map(|(a, b)| *a * *b).sum();
        self.push("dot", Tensor::scalar(s), Op::Dot { x, weights }, &[x])
    }

    /// Soft Dice loss `1 - (2·Σp·t + ε) / (Σp + Σt + ε)`.
    ///
    /// Binary targets use `p = sigmoid(logits)`; class targets use channel
    /// softmax probabilities and average the per-class loss over the classes
    /// present in the target.
    pub fn dice_loss(&mut self, logits: Var, target: &DiceTarget, eps: f64) -> Result<Var> {
        let (loss, dlogits) = dice_forward(self.value(logits), target, eps)?;
        let op = Op::Dice { logits, dlogits };
        self.push("dice_loss", Tensor::scalar(T::from_f64(loss)), op, &[logits])
    }

    /// Reverse sweep from a scalar `loss`. Every node that requires a gradient
    /// receives one; leaves not reached by the loss get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, padding } => {
                let need_dx = self.requires_grad(*x);
                let g = conv2d_backward(self.value(*x), self.value(*w), gy, *padding, need_dx)?;
                if let Some(dx) = g.dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, g.dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, g.db);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape().to_vec());
                for (o, &src) in argmax.iter().enumerate() {
                    dx.data_mut()[src] += gy.data()[o];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample2 { x } => {
                let dx = bilinear_upsample2_backward(gy, self.value(*x).shape());
                self.accumulate(grads, *x, dx);
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (b, c, s) = channel_view(gy.shape())?;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        for i in (bi * c + ch) * s..(bi * c + ch + 1) * s {
                            dbeta[ch] += gy.data()[i];
                            dgamma[ch] += gy.data()[i] * xhat[i];
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let mut dx = Tensor::zeros(gy.shape().to_vec());
                    let n = T::from_f64((b * s) as f64);
                    for bi in 0..b {
                        for ch in 0..c {
                            let scale = gam[ch] * inv_std[ch];
                            for i in (bi * c + ch) * s..(bi * c + ch + 1) * s {
                                dx.data_mut()[i] = if *batch_stats {
                                    scale * (gy.data()[i] - (dbeta[ch] + xhat[i] * dgamma[ch]) / n)
                                } else {
                                    scale * gy.data()[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, Tensor::from_vec([c], dgamma)?);
                self.accumulate(grads, *beta, Tensor::from_vec([c], dbeta)?);
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let mut dx = gy.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let mut dx = gy.clone();
                for (d, &p) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d *= p * (T::one() - p);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax { x } => {
                let (b, c, s) = channel_view(gy.shape())?;
                let p = node.value.data();
                let mut dx = Tensor::zeros(gy.shape().to_vec());
                for bi in 0..b {
                    for i in 0..s {
                        let at = |ch: usize| (bi * c + ch) * s + i;
                        let dotp: T = (0..c).map(|ch| p[at(ch)] * gy.data()[at(ch)]).sum();
                        for ch in 0..c {
                            dx.data_mut()[at(ch)] = p[at(ch)] * (gy.data()[at(ch)] - dotp);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Concat { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let batch = va.shape()[0];
                let (ra, rb) = (va.len() / batch, vb.len() / batch);
                let mut da = Vec::with_capacity(va.len());
                let mut db = Vec::with_capacity(vb.len());
                for n in 0..batch {
                    let row = &gy.data()[n * (ra + rb)..(n + 1) * (ra + rb)];
                    da.extend_from_slice(&row[..ra]);
                    db.extend_from_slice(&row[ra..]);
                }
                self.accumulate(grads, *a, Tensor::from_vec(va.shape().to_vec(), da)?);
                self.accumulate(grads, *b, Tensor::from_vec(vb.shape().to_vec(), db)?);
            }
            Op::Reshape { x } => {
                let dx = gy.clone().reshape(self.value(*x).shape().to_vec())?;
                self.accumulate(grads, *x, dx);
            }
            Op::Linear { x, map } => {
                let mut dx = Tensor::zeros(self.value(*x).shape().to_vec());
                map.apply_transpose(gy.data(), dx.data_mut());
                self.accumulate(grads, *x, dx);
            }
            Op::GroupReduce { x, reduce, argmax } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                match reduce {
                    GroupReduce::Max => {
                        for (o, &src) in argmax.iter().enumerate() {
                            dx.data_mut()[src] += gy.data()[o];
                        }
                    }
                    GroupReduce::Mean => {
                        let s = xv.shape();
                        let (outer, g) = (s[0] * s[1], s[2]);
                        let inner: usize = s[3..].iter().product();
                        let scale = T::one() / T::from_f64(g as f64);
                        for o in 0..outer {
                            for e in 0..g {
                                for i in 0..inner {
                                    dx.data_mut()[(o * g + e) * inner + i] = gy.data()[o * inner + i] * scale;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sum { x } => {
                let g = gy.data()[0];
                let dx = Tensor::full(self.value(*x).shape().to_vec(), g);
                self.accumulate(grads, *x, dx);
            }
            Op::Dot { x, weights } => {
                let g = gy.data()[0];
                self.accumulate(grads, *x, weights.map(|w| w * g));
            }
            Op::Dice { logits, dlogits } => {
                let g = gy.data()[0];
                self.accumulate(grads, *logits, dlogits.map(|d| d * g));
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, s) = channel_view(x.shape())?;
    let mut y = Tensor::zeros(x.shape().to_vec());
    let xd = x.data();
    for bi in 0..b {
        for i in 0..s {
            let at = |ch: usize| (bi * c + ch) * s + i;
            let m = (0..c).fold(T::neg_infinity(), |m, ch| m.max(xd[at(ch)]));
            let mut z = T::zero();
            for ch in 0..c {
                let e = (xd[at(ch)] - m).exp();
                y.data_mut()[at(ch)] = e;
                z += e;
            }
            for ch in 0..c {
                y.data_mut()[at(ch)] = y.data()[at(ch)] / z;
            }
        }
    }
    Ok(y)
}

/// Loss value and gradient w.r.t. the logits. Sums are accumulated in f64.
fn dice_forward<T: Scalar>(logits: &Tensor<T>, target: &DiceTarget, eps: f64) -> Result<(f64, Tensor<T>)> {
    let (b, c, s) = channel_view(logits.shape())?;
    match target {
        DiceTarget::Binary(t) => {
            if c != 1 || t.len() != b * s {
                return Err(Error::shape(
                    "dice_loss",
                    format!("binary target of {} pixels vs logits {:?}", t.len(), logits.shape()),
                ));
            }
            let p: Vec<f64> = logits.data().iter().map(|&z| sigmoid(z.as_f64())).collect();
            let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
            for (&pi, &ti) in p.iter().zip(t) {
                let ti = f64::from(ti.min(1));
                inter += pi * ti;
                sp += pi;
                st += ti;
            }
            let num = 2.0 * inter + eps;
            let den = sp + st + eps;
            let loss = 1.0 - num / den;
            let grad = p
                .iter()
                .zip(t)
                .map(|(&pi, &ti)| {
                    let dl_dp = -(2.0 * f64::from(ti.min(1)) * den - num) / (den * den);
                    T::from_f64(dl_dp * pi * (1.0 - pi))
                })
                .collect();
            Ok((loss, Tensor::from_vec(logits.shape().to_vec(), grad)?))
        }
        DiceTarget::Classes(t) => {
            if t.len() != b * s {
                return Err(Error::shape(
                    "dice_loss",
                    format!("class target of {} pixels vs logits {:?}", t.len(), logits.shape()),
                ));
            }
            if let Some(&bad) = t.iter().find(|&&v| usize::from(v) >= c) {
                return Err(Error::ClassOutOfRange {
                    value: bad.into(),
                    n_classes: c,
                });
            }
            let p: Vec<f64> = softmax_channels(&logits.cast::<f64>())?.into_data();
            let at = |bi: usize, ch: usize, i: usize| (bi * c + ch) * s + i;
            let mut inter = vec![0.0; c];
            let mut sp = vec![0.0; c];
            let mut st = vec![0.0; c];
            for bi in 0..b {
                for i in 0..s {
                    let cls = usize::from(t[bi * s + i]);
                    st[cls] += 1.0;
                    inter[cls] += p[at(bi, cls, i)];
                    for ch in 0..c {
                        sp[ch] += p[at(bi, ch, i)];
                    }
                }
            }
            let present: Vec<usize> = (0..c).filter(|&ch| st[ch] > 0.0).collect();
            let k = present.len() as f64;
            let mut loss = 0.0;
            let mut dl_dp = vec![0.0; p.len()];
            for &ch in &present {
                let num = 2.0 * inter[ch] + eps;
                let den = sp[ch] + st[ch] + eps;
                loss += (1.0 - num / den) / k;
                for bi in 0..b {
                    for i in 0..s {
                        let ti = if usize::from(t[bi * s + i]) == ch { 1.0 } else { 0.0 };
                        dl_dp[at(bi, ch, i)] = -(2.0 * ti * den - num) / (den * den) / k;
                    }
                }
            }
            let mut grad = vec![T::zero(); p.len()];
            for bi in 0..b {
                for i in 0..s {
                    let dotp: f64 = (0..c).map(|ch| p[at(bi, ch, i)] * dl_dp[at(bi, ch, i)]).sum();
                    for ch in 0..c {
                        let j = at(bi, ch, i);
                        grad[j] = T::from_f64(p[j] * (dl_dp[j] - dotp));
                    }
                }
            }
            Ok((loss, Tensor::from_vec(logits.shape().to_vec(), grad)?))
        }
    }
}
