//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every primitive applied during one forward pass. Node
//! indices grow monotonically, so the tape order is already a topological
//! order and [`Graph::backward`] is a single reverse sweep. Leaves either
//! require a gradient (trainable parameters, attacked inputs) or are
//! constants; gradients are only propagated through nodes that can reach a
//! gradient-requiring leaf, which is what makes frozen generators free in the
//! backward pass.
//!
//! Leaves can borrow their values (`Cow::Borrowed`), so inserting a large
//! parameter matrix does not copy it.

mod conv;
mod gradcheck;
mod param;

pub use gradcheck::{gradcheck, max_relative_error, GRADCHECK_STEP};
pub use param::{adam_step, AdamConfig, AdamState, ParamId, Parameter};

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{GrffError, Result};
use crate::tensor::{gemm, Tensor, Transpose};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Cos,
    Sin,
    Tanh,
    Relu,
    LeakyRelu(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

/// Default numerical-stability epsilon for batch normalization.
pub const BATCHNORM_EPS: f64 = 1e-5;
/// Default momentum for running statistics.
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

/// Per-feature statistics of one training-mode batch-norm application.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n−1) variance, the quantity folded into running stats.
    pub var: Vec<f64>,
}

/// Exponential running averages used by evaluation-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(features: usize) -> Self {
        RunningStats {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }

    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, b_t: Transpose },
    AddBias { x: usize, bias: usize },
    Binary { a: usize, b: usize, kind: Binary },
    Scale { x: usize, factor: f64 },
    Unary { x: usize, kind: Unary },
    Fourier { x: usize },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Conv2d { x: usize, k: usize },
    MaxPool2 { x: usize, argmax: Vec<usize> },
    Reshape { x: usize },
    SoftmaxCe { logits: usize, probs: Vec<f64>, labels: Vec<usize> },
    Sum { x: usize },
    Mean { x: usize },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Computation record for one forward pass.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by one reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, usize>,
}

impl Gradients {
    /// ∂loss/∂var, if `var` was on a gradient path.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    /// Gradient for a parameter inserted with [`Graph::param`].
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|&i| self.grads[i].as_ref())
    }

    /// Adds this sweep's gradient into `p.grad`. Returns false when the
    /// parameter was not part of the graph.
    pub fn accumulate_into(&self, p: &mut Parameter) -> bool {
        match self.param(p.id()) {
            Some(g) => {
                p.accumulate_grad(g);
                true
            }
            None => false,
        }
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    /// Owned leaf.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Borrowed constant leaf.
    pub fn constant(&mut self, value: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable parameter leaf. Its gradient is reported under `p.id()`.
    pub fn param(&mut self, p: &'a Parameter) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(p.value()),
            op: Op::Leaf,
            requires_grad: true,
            param: Some(p.id()),
        });
        Var(self.nodes.len() - 1)
    }

    /// Parameter leaf that is trainable only when `trainable` is set;
    /// otherwise it enters the graph as a constant.
    pub fn param_if(&mut self, p: &'a Parameter, trainable: bool) -> Var {
        if trainable {
            self.param(p)
        } else {
            self.constant(p.value())
        }
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_t: Transpose) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.matmul_t(bv, b_t)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out, Op::MatMul { a: a.0, b: b.0, b_t }, rg))
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, Transpose::No)
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, Transpose::Yes)
    }

    /// Adds a length-`F` bias to every row of a `B×F` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (_, f) = xv.dims2()?;
        if bv.len() != f {
            return Err(GrffError::dim("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(f) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x.0) || self.rg(bias.0);
        Ok(self.push(out, Op::AddBias { x: x.0, bias: bias.0 }, rg))
    }

    pub fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(GrffError::dim("elementwise", av.shape(), bv.shape()));
        }
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
        };
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out, Op::Binary { a: a.0, b: b.0, kind }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.rg(x.0);
        self.push(out, Op::Scale { x: x.0, factor }, rg)
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let xv = self.value(x);
        let out = match kind {
            Unary::Cos => xv.map(f64::cos),
            Unary::Sin => xv.map(f64::sin),
            Unary::Tanh => xv.map(f64::tanh),
            Unary::Relu => xv.map(|v| v.max(0.0)),
            Unary::LeakyRelu(s) => xv.map(|v| if v > 0.0 { v } else { s * v }),
        };
        let rg = self.rg(x.0);
        self.push(out, Op::Unary { x: x.0, kind }, rg)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Cos)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sin)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    /// Fourier lift along axis 1: `[B, D, …] → [B, 2D, …]`, the first `D`
    /// channels holding `scale·cos(x)` and the last `D` holding `scale·sin(x)`.
    pub fn fourier(&mut self, x: Var, scale: f64) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() < 2 {
            return Err(GrffError::Shape(format!(
                "fourier lift needs at least 2 axes, got {:?}",
                xv.shape()
            )));
        }
        let b = xv.shape()[0];
        let block = xv.row_len();
        let mut out = vec![0.0; 2 * b * block];
        for (src, dst) in xv.data().chunks(block).zip(out.chunks_mut(2 * block)) {
            let (c, s) = dst.split_at_mut(block);
            for ((v, co), si) in src.iter().zip(c).zip(s) {
                let (sn, cs) = v.sin_cos();
                *co = scale * cs;
                *si = scale * sn;
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[1] *= 2;
        let rg = self.rg(x.0);
        Ok(self.push(Tensor::new(shape, out)?, Op::Fourier { x: x.0 }, rg))
    }

    /// Training-mode batch normalization over the rows of a `B×F` matrix.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let xv = self.value(x);
        let (b, f) = xv.dims2()?;
        if b < 2 {
            return Err(GrffError::DegenerateBatch(format!(
                "batch norm in training mode needs at least 2 rows, got {b}"
            )));
        }
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != f || bv.len() != f {
            return Err(GrffError::dim("batchnorm", xv.shape(), gv.shape()));
        }
        let mut mean = vec![0.0; f];
        for row in xv.data().chunks(f) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= b as f64);
        let mut var = vec![0.0; f];
        for row in xv.data().chunks(f) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / b as f64 + eps).sqrt()).collect();
        let unbiased: Vec<f64> = var.iter().map(|s| s / (b - 1) as f64).collect();
        let (out, x_hat) = normalize_rows(xv.data(), f, &mean, &inv_std, gv.data(), bv.data());
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        let v = self.push(
            Tensor::new(vec![b, f], out)?,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                x_hat,
                inv_std,
                train: true,
            },
            rg,
        );
        Ok((v, BatchStats { mean, var: unbiased }))
    }

    /// Evaluation-mode batch normalization using running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats,
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (b, f) = xv.dims2()?;
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != f || bv.len() != f || running.mean.len() != f {
            return Err(GrffError::dim("batchnorm", xv.shape(), gv.shape()));
        }
        let inv_std: Vec<f64> = running.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (out, x_hat) =
            normalize_rows(xv.data(), f, &running.mean, &inv_std, gv.data(), bv.data());
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        Ok(self.push(
            Tensor::new(vec![b, f], out)?,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                x_hat,
                inv_std,
                train: false,
            },
            rg,
        ))
    }

    /// Stride-1, no-padding cross-correlation of `x[B×C×H×W]` with
    /// `kernels[K×C×kh×kw]`.
    pub fn conv2d_valid(&mut self, x: Var, kernels: Var) -> Result<Var> {
        let out = conv::conv2d_forward(self.value(x), self.value(kernels))?;
        let rg = self.rg(x.0) || self.rg(kernels.0);
        Ok(self.push(out, Op::Conv2d { x: x.0, k: kernels.0 }, rg))
    }

    /// Non-overlapping 2×2 max pooling over the last two axes.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = conv::maxpool2_forward(self.value(x))?;
        let rg = self.rg(x.0);
        Ok(self.push(out, Op::MaxPool2 { x: x.0, argmax }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x.0);
        Ok(self.push(out, Op::Reshape { x: x.0 }, rg))
    }

    /// Mean softmax cross-entropy of `logits[B×C]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, c) = lv.dims2()?;
        if labels.len() != b {
            return Err(GrffError::dim("softmax_cross_entropy", lv.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(GrffError::Label(format!("label {bad} outside [0, {c})")));
        }
        let probs = softmax_rows(lv.data(), c);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -log_softmax_at(&lv.data()[i * c..(i + 1) * c], y))
            .sum::<f64>()
            / b as f64;
        let rg = self.rg(logits.0);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits: logits.0,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x.0);
        self.push(Tensor::scalar(s), Op::Sum { x: x.0 }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.len() as f64;
        let rg = self.rg(x.0);
        self.push(Tensor::scalar(s), Op::Mean { x: x.0 }, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(GrffError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_t } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let (m, k) = av.dims2()?;
                let n = out.shape()[1];
                if self.rg(*a) {
                    // dA = dC · Bᵀ (or dC · B when B was used transposed)
                    let mut da = vec![0.0; m * k];
                    let bt = match b_t {
                        Transpose::No => Transpose::Yes,
                        Transpose::Yes => Transpose::No,
                    };
                    gemm(m, n, k, g.data(), Transpose::No, bv.data(), bt, &mut da, 0.0);
                    accumulate(grads, *a, av.shape(), da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    match b_t {
                        // dB = Aᵀ · dC
                        Transpose::No => {
                            gemm(k, m, n, av.data(), Transpose::Yes, g.data(), Transpose::No, &mut db, 0.0)
                        }
                        // d(Bᵀ) = Aᵀ·dC  ⇒  dB = dCᵀ · A
                        Transpose::Yes => {
                            gemm(n, m, k, g.data(), Transpose::Yes, av.data(), Transpose::No, &mut db, 0.0)
                        }
                    }
                    accumulate(grads, *b, bv.shape(), db);
                }
            }
            Op::AddBias { x, bias } => {
                if self.rg(*x) {
                    accumulate(grads, *x, g.shape(), g.data().to_vec());
                }
                if self.rg(*bias) {
                    let f = self.nodes[*bias].value.len();
                    let mut db = vec![0.0; f];
                    for row in g.data().chunks(f) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *bias, self.nodes[*bias].value.shape(), db);
                }
            }
            Op::Binary { a, b, kind } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                match kind {
                    Binary::Add | Binary::Sub => {
                        if self.rg(*a) {
                            accumulate(grads, *a, av.shape(), g.data().to_vec());
                        }
                        if self.rg(*b) {
                            let sign = if *kind == Binary::Add { 1.0 } else { -1.0 };
                            accumulate(grads, *b, bv.shape(), g.data().iter().map(|v| sign * v).collect());
                        }
                    }
                    Binary::Mul => {
                        if self.rg(*a) {
                            let d = g.data().iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                            accumulate(grads, *a, av.shape(), d);
                        }
                        if self.rg(*b) {
                            let d = g.data().iter().zip(av.data()).map(|(g, x)| g * x).collect();
                            accumulate(grads, *b, bv.shape(), d);
                        }
                    }
                }
            }
            Op::Scale { x, factor } => {
                if self.rg(*x) {
                    accumulate(grads, *x, g.shape(), g.data().iter().map(|v| v * factor).collect());
                }
            }
            Op::Unary { x, kind } => {
                if self.rg(*x) {
                    let xv = &self.nodes[*x].value;
                    let d: Vec<f64> = match kind {
                        Unary::Cos => zip_map(g, xv, |g, x| -g * x.sin()),
                        Unary::Sin => zip_map(g, xv, |g, x| g * x.cos()),
                        Unary::Tanh => zip_map(g, out, |g, y| g * (1.0 - y * y)),
                        Unary::Relu => zip_map(g, xv, |g, x| if x > 0.0 { g } else { 0.0 }),
                        Unary::LeakyRelu(s) => {
                            let s = *s;
                            zip_map(g, xv, move |g, x| if x > 0.0 { g } else { s * g })
                        }
                    };
                    accumulate(grads, *x, xv.shape(), d);
                }
            }
            Op::Fourier { x } => {
                if self.rg(*x) {
                    let xv = &self.nodes[*x].value;
                    let block = xv.row_len();
                    let mut d = vec![0.0; xv.len()];
                    // out = [s·cos x | s·sin x], so dx = −(s·sin x)·g_c + (s·cos x)·g_s.
                    for ((dst, o), gg) in d
                        .chunks_mut(block)
                        .zip(out.data().chunks(2 * block))
                        .zip(g.data().chunks(2 * block))
                    {
                        let (oc, os) = o.split_at(block);
                        let (gc, gs) = gg.split_at(block);
                        for j in 0..block {
                            dst[j] = -os[j] * gc[j] + oc[j] * gs[j];
                        }
                    }
                    accumulate(grads, *x, xv.shape(), d);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                train,
            } => {
                let (b, f) = out.dims2()?;
                let gv = &self.nodes[*gamma].value;
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                for (grow, hrow) in g.data().chunks(f).zip(x_hat.chunks(f)) {
                    for j in 0..f {
                        dbeta[j] += grow[j];
                        dgamma[j] += grow[j] * hrow[j];
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; b * f];
                    if *train {
                        let bn = b as f64;
                        for ((drow, grow), hrow) in
                            dx.chunks_mut(f).zip(g.data().chunks(f)).zip(x_hat.chunks(f))
                        {
                            for j in 0..f {
                                drow[j] = gv.data()[j] * inv_std[j] / bn
                                    * (bn * grow[j] - dbeta[j] - hrow[j] * dgamma[j]);
                            }
                        }
                    } else {
                        for (drow, grow) in dx.chunks_mut(f).zip(g.data().chunks(f)) {
                            for j in 0..f {
                                drow[j] = gv.data()[j] * inv_std[j] * grow[j];
                            }
                        }
                    }
                    accumulate(grads, *x, &[b, f], dx);
                }
                if self.rg(*gamma) {
                    accumulate(grads, *gamma, gv.shape(), dgamma);
                }
                if self.rg(*beta) {
                    accumulate(grads, *beta, self.nodes[*beta].value.shape(), dbeta);
                }
            }
            Op::Conv2d { x, k } => {
                let xv = &self.nodes[*x].value;
                let kv = &self.nodes[*k].value;
                let (dx, dk) = conv::conv2d_backward(xv, kv, g, self.rg(*x), self.rg(*k))?;
                if let Some(dx) = dx {
                    accumulate(grads, *x, xv.shape(), dx);
                }
                if let Some(dk) = dk {
                    accumulate(grads, *k, kv.shape(), dk);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.rg(*x) {
                    let xv = &self.nodes[*x].value;
                    let mut d = vec![0.0; xv.len()];
                    for (&src, gv) in argmax.iter().zip(g.data()) {
                        d[src] += gv;
                    }
                    accumulate(grads, *x, xv.shape(), d);
                }
            }
            Op::Reshape { x } => {
                if self.rg(*x) {
                    accumulate(grads, *x, self.nodes[*x].value.shape(), g.data().to_vec());
                }
            }
            Op::SoftmaxCe { logits, probs, labels } => {
                if self.rg(*logits) {
                    let lv = &self.nodes[*logits].value;
                    let (b, c) = lv.dims2()?;
                    let scale = g.item() / b as f64;
                    let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (i, &y) in labels.iter().enumerate() {
                        d[i * c + y] -= scale;
                    }
                    accumulate(grads, *logits, lv.shape(), d);
                }
            }
            Op::Sum { x } => {
                if self.rg(*x) {
                    let xv = &self.nodes[*x].value;
                    accumulate(grads, *x, xv.shape(), vec![g.item(); xv.len()]);
                }
            }
            Op::Mean { x } => {
                if self.rg(*x) {
                    let xv = &self.nodes[*x].value;
                    let v = g.item() / xv.len() as f64;
                    accumulate(grads, *x, xv.shape(), vec![v; xv.len()]);
                }
            }
        }
        Ok(())
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    g.data().iter().zip(x.data()).map(|(&g, &x)| f(g, x)).collect()
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, shape: &[usize], d: Vec<f64>) {
    match &mut grads[idx] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(&d) {
                *e += v;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), d).expect("gradient shape matches value"));
        }
    }
}

fn normalize_rows(
    x: &[f64],
    f: usize,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; x.len()];
    let mut x_hat = vec![0.0; x.len()];
    for ((orow, hrow), xrow) in out.chunks_mut(f).zip(x_hat.chunks_mut(f)).zip(x.chunks(f)) {
        for j in 0..f {
            let h = (xrow[j] - mean[j]) * inv_std[j];
            hrow[j] = h;
            orow[j] = gamma[j] * h + beta[j];
        }
    }
    (out, x_hat)
}

/// Row-wise softmax of a `B×C` buffer, stabilized by max subtraction.
pub fn softmax_rows(logits: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (orow, row) in out.chunks_mut(c).zip(logits.chunks(c)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, v) in orow.iter_mut().zip(row) {
            *o = (v - m).exp();
            z += *o;
        }
        orow.iter_mut().for_each(|o| *o /= z);
    }
    out
}

fn log_softmax_at(row: &[f64], y: usize) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    row[y] - lse
}

/// Index of the largest value in each row; ties go to the lowest index.
pub fn argmax_rows(values: &Tensor) -> Vec<usize> {
    let c = values.row_len();
    values
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
