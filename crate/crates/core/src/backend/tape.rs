//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every op appends one node holding its output value and whatever it needs
//! for the backward pass. Nodes are only ever appended, so recording order is
//! a topological order and [`Tape::backward`] simply walks it in reverse.
//!
//! Nodes whose inputs are all constants are stored as constants themselves;
//! running a frozen model on a tape therefore records no backward state.

use super::element::Element;
use super::kernels::{broadcast, conv, layout, matmul, norm, pool, resize, softmax};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Batch statistics produced by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnBatchStats<T> {
    pub mean: Tensor<T>,
    pub var_unbiased: Tensor<T>,
}

impl<T: Element> BnBatchStats<T> {
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply(&self, running_mean: &mut Tensor<T>, running_var: &mut Tensor<T>, momentum: f64) {
        let m = T::lit(momentum);
        let keep = T::one() - m;
        for (r, &b) in running_mean.data_mut().iter_mut().zip(self.mean.data()) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in running_var.data_mut().iter_mut().zip(self.var_unbiased.data()) {
            *r = keep * *r + m * b;
        }
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    SignedSqrt(Var, T),
    /// Sum over axes, output keeps reduced axes with extent 1, times `scale`.
    Reduce(Var, T),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Expand(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Matmul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Softmax(Var, f64),
    LogSoftmax(Var, f64),
    Resize(Var),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::Matmul { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sqrt(x)
            | Op::SignedSqrt(x, _)
            | Op::Reduce(x, _)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::Expand(x)
            | Op::Softmax(x, _)
            | Op::LogSoftmax(x, _)
            | Op::Resize(x)
            | Op::Slice { x, .. }
            | Op::MaxPool2d { x, .. } => vec![*x],
            Op::Concat(xs, _) => xs.clone(),
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every differentiable leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    check_finite: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
            check_finite: false,
        }
    }

    /// Fail any op whose output contains NaN or infinity.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
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

    /// Constant copy of `v`; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = broadcast::binary(self.value(a), self.value(b), "add", |x, y| x + y)?;
        self.push("add", y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = broadcast::binary(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        self.push("sub", y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = broadcast::binary(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        self.push("mul", y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = broadcast::binary(self.value(a), self.value(b), "div", |x, y| x / y)?;
        self.push("div", y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::lit(s);
        let y = self.value(x).map(|v| v * s);
        self.push("scale", y, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::lit(s);
        let y = self.value(x).map(|v| v + s);
        self.push("add_scalar", y, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| if v > T::zero() || v.is_nan() { v } else { T::zero() });
        self.push("relu", y, Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
        let y = self
            .value(x)
            .map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()));
        self.push("gelu", y, Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| v.exp());
        self.push("exp", y, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| v.ln());
        self.push("ln", y, Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| v.sqrt());
        self.push("sqrt", y, Op::Sqrt(x))
    }

    /// `sign(x) * sqrt(|x| + eps)`, zero at zero.
    pub fn signed_sqrt(&mut self, x: Var, eps: f64) -> Result<Var> {
        let e = T::lit(eps);
        let y = self.value(x).map(|v| {
            if v == T::zero() {
                T::zero()
            } else {
                v.signum() * (v.abs() + e).sqrt()
            }
        });
        self.push("signed_sqrt", y, Op::SignedSqrt(x, e))
    }

    // ---- reductions --------------------------------------------------

    fn reduce(&mut self, x: Var, axes: &[usize], mean: bool, keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut kept = shape.clone();
        let mut count = 1usize;
        for &a in axes {
            if a >= shape.len() {
                return Err(Error::dim("reduce", format!("axis {a} for {shape:?}")));
            }
            count *= shape[a];
            kept[a] = 1;
        }
        let scale = if mean { T::one() / T::lit(count.max(1) as f64) } else { T::one() };
        let y = broadcast::reduce_to_shape(self.value(x), &kept).map(|v| v * scale);
        let r = self.push("reduce", y, Op::Reduce(x, scale))?;
        if keepdim {
            Ok(r)
        } else {
            let out: Vec<usize> = shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect();
            self.reshape(r, &out)
        }
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, &axes, false, false)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, &axes, true, false)
    }

    pub fn sum_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(x, axes, false, keepdim)
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(x, axes, true, keepdim)
    }

    /// NCHW -> NC mean over the spatial axes.
    pub fn global_avg_pool2d(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 4 {
            return Err(Error::dim("global_avg_pool2d", format!("expected NCHW, got {:?}", self.shape(x))));
        }
        self.mean_axes(x, &[2, 3], false)
    }

    /// (N, T, C) -> (N, C) mean over tokens `[start, T)`.
    pub fn token_mean_pool(&mut self, x: Var, start: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || start >= shape[1] {
            return Err(Error::dim("token_mean_pool", format!("start {start} for {shape:?}")));
        }
        let patches = if start == 0 { x } else { self.slice(x, 1, start, shape[1] - start)? };
        self.mean_axes(patches, &[1], false)
    }

    // ---- layout ------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        self.push("reshape", y, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let y = layout::permute(self.value(x), perm)?;
        self.push("permute", y, Op::Permute(x, perm.to_vec()))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(Error::dim("transpose", "needs at least two axes"));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(x, &perm)
    }

    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = broadcast::broadcast_to(self.value(x), shape)?;
        self.push("expand", y, Op::Expand(x))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let y = layout::concat(&vals, axis)?;
        self.push("concat", y, Op::Concat(xs.to_vec(), axis))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let y = layout::slice(self.value(x), axis, start, len)?;
        self.push("slice", y, Op::Slice { x, axis, start })
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) @ op(b)` where `op` transposes the trailing two axes when set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let y = matmul::matmul_forward(self.value(a), self.value(b), ta, tb)?;
        self.push("matmul", y, Op::Matmul { a, b, ta, tb })
    }

    /// `x @ weight^T + bias` with `weight` stored `(out, in)`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul_t(x, weight, false, true)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let y = conv::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        self.push(
            "conv2d",
            y,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
        )
    }

    // ---- normalization -----------------------------------------------

    /// Train-mode batch norm; returns the batch statistics for the caller to
    /// fold into its running estimates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BnBatchStats<T>)> {
        let out = norm::batch_norm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let stats = BnBatchStats {
            mean: Tensor::from_vec(out.mean.clone()),
            var_unbiased: Tensor::from_vec(out.var_unbiased),
        };
        let v = self.push(
            "batch_norm",
            out.y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: out.mean,
                inv_std: out.inv_std,
                train: true,
            },
        )?;
        Ok((v, stats))
    }

    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var> {
        let y = norm::batch_norm_eval(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        )?;
        let inv_std = running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + T::lit(eps)).sqrt())
            .collect();
        self.push(
            "batch_norm",
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: running_mean.data().to_vec(),
                inv_std,
                train: false,
            },
        )
    }

    /// Batch norm that updates the running statistics in place when training.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Tensor<T>,
        running_var: &mut Tensor<T>,
        mode: BnMode,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        match mode {
            BnMode::Train => {
                let (y, stats) = self.batch_norm_train(x, gamma, beta, eps)?;
                stats.apply(running_mean, running_var, momentum);
                Ok(y)
            }
            BnMode::Eval => self.batch_norm_eval(x, gamma, beta, running_mean, running_var, eps),
        }
    }

    // ---- pooling / resampling ----------------------------------------

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let (y, argmax) = pool::max_pool2d_forward(self.value(x), kernel, stride, padding)?;
        self.push("max_pool2d", y, Op::MaxPool2d { x, argmax })
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = resize::bilinear_forward(self.value(x), out_h, out_w)?;
        self.push("bilinear_resize", y, Op::Resize(x))
    }

    // ---- softmax family ----------------------------------------------

    pub fn softmax(&mut self, x: Var, tau: f64) -> Result<Var> {
        let y = softmax::softmax(self.value(x), tau)?;
        self.push("softmax", y, Op::Softmax(x, tau))
    }

    pub fn log_softmax(&mut self, x: Var, tau: f64) -> Result<Var> {
        let y = softmax::log_softmax(self.value(x), tau)?;
        self.push("log_softmax", y, Op::LogSoftmax(x, tau))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse pass from a scalar. Consumes the tape's recording.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, contribution) in self.op_backward(i, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn op_backward(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, broadcast::reduce_to_shape(g, val(*a).shape())));
                out.push((*b, broadcast::reduce_to_shape(g, val(*b).shape())));
            }
            Op::Sub(a, b) => {
                out.push((*a, broadcast::reduce_to_shape(g, val(*a).shape())));
                let nb = g.map(|v| -v);
                out.push((*b, broadcast::reduce_to_shape(&nb, val(*b).shape())));
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let ga = broadcast::binary(g, val(*b), "mul_bw", |x, y| x * y)?;
                    out.push((*a, broadcast::reduce_to_shape(&ga, val(*a).shape())));
                }
                if rg(*b) {
                    let gb = broadcast::binary(g, val(*a), "mul_bw", |x, y| x * y)?;
                    out.push((*b, broadcast::reduce_to_shape(&gb, val(*b).shape())));
                }
            }
            Op::Div(a, b) => {
                if rg(*a) {
                    let ga = broadcast::binary(g, val(*b), "div_bw", |x, y| x / y)?;
                    out.push((*a, broadcast::reduce_to_shape(&ga, val(*a).shape())));
                }
                if rg(*b) {
                    // d(a/b)/db = -(a/b)/b = -y/b
                    let yb = broadcast::binary(&node.value, val(*b), "div_bw", |y, b| -y / b)?;
                    let gb = broadcast::binary(g, &yb, "div_bw", |x, y| x * y)?;
                    out.push((*b, broadcast::reduce_to_shape(&gb, val(*b).shape())));
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                out.push((*x, g.map(|v| v * s)));
            }
            Op::AddScalar(x) => out.push((*x, g.clone())),
            Op::Relu(x) => {
                out.push((*x, g.zip_map(&node.value, |g, y| if y > T::zero() { g } else { T::zero() })?));
            }
            Op::Gelu(x) => {
                let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
                let three = T::lit(3.0);
                let d = val(*x).map(|v| {
                    let t = (c * (v + a * v * v * v)).tanh();
                    half * (T::one() + t) + half * v * (T::one() - t * t) * c * (T::one() + three * a * v * v)
                });
                out.push((*x, g.zip_map(&d, |g, d| g * d)?));
            }
            Op::Exp(x) => out.push((*x, g.zip_map(&node.value, |g, y| g * y)?)),
            Op::Log(x) => out.push((*x, g.zip_map(val(*x), |g, x| g / x)?)),
            Op::Sqrt(x) => {
                let two = T::lit(2.0);
                out.push((*x, g.zip_map(&node.value, |g, y| g / (two * y))?));
            }
            Op::SignedSqrt(x, e) => {
                let (two, e) = (T::lit(2.0), *e);
                // the forward pins 0 to 0, so exact zeros pass no gradient
                out.push((
                    *x,
                    g.zip_map(val(*x), |g, x| {
                        if x == T::zero() {
                            T::zero()
                        } else {
                            g / (two * (x.abs() + e).sqrt())
                        }
                    })?,
                ));
            }
            Op::Reduce(x, scale) => {
                let s = *scale;
                let full = broadcast::broadcast_to(g, val(*x).shape())?;
                out.push((*x, full.map(|v| v * s)));
            }
            Op::Reshape(x) => out.push((*x, g.clone().reshape(val(*x).shape())?)),
            Op::Permute(x, perm) => out.push((*x, layout::permute(g, &layout::inverse_perm(perm))?)),
            Op::Expand(x) => out.push((*x, broadcast::reduce_to_shape(g, val(*x).shape()))),
            Op::Concat(xs, axis) => {
                let mut start = 0;
                for &x in xs {
                    let len = val(x).shape()[*axis];
                    if rg(x) {
                        out.push((x, layout::slice(g, *axis, start, len)?));
                    }
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => {
                out.push((*x, layout::unslice(g, val(*x).shape(), *axis, *start)));
            }
            Op::Matmul { a, b, ta, tb } => {
                let (ga, gb) = matmul::matmul_backward(val(*a), val(*b), *ta, *tb, g, (rg(*a), rg(*b)))?;
                out.extend(ga.map(|t| (*a, t)));
                out.extend(gb.map(|t| (*b, t)));
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let need = (rg(*x), rg(*w), b.map(rg).unwrap_or(false));
                let grads = conv::conv2d_backward(val(*x), val(*w), b.is_some(), g, *stride, *padding, need)?;
                out.extend(grads.input.map(|t| (*x, t)));
                out.extend(grads.weight.map(|t| (*w, t)));
                if let (Some(b), Some(t)) = (b, grads.bias) {
                    out.push((*b, t));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let grads = norm::batch_norm_backward(val(*x), val(*gamma), mean, inv_std, g, *train)?;
                out.push((*x, grads.input));
                out.push((*gamma, grads.gamma));
                out.push((*beta, grads.beta));
            }
            Op::MaxPool2d { x, argmax } => {
                out.push((*x, pool::max_pool2d_backward(val(*x).shape(), argmax, g)));
            }
            Op::Softmax(x, tau) => out.push((*x, softmax::softmax_backward(&node.value, g, *tau))),
            Op::LogSoftmax(x, tau) => out.push((*x, softmax::log_softmax_backward(&node.value, g, *tau))),
            Op::Resize(x) => out.push((*x, resize::bilinear_backward(val(*x).shape(), g)?)),
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_backward_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn backward_needs_a_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn finite_checks_reject_nan() {
        let mut tape = Tape::<f64>::new().with_finite_checks(true);
        let x = tape.leaf(Tensor::from_vec(vec![-1.0]));
        assert!(matches!(tape.sqrt(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn signed_sqrt_passes_no_gradient_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![0.0, 4.0, -4.0]));
        let y = tape.signed_sqrt(x, 1e-12).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        let g = g.get(x).unwrap().data();
        assert_eq!(g[0], 0.0);
        assert!((g[1] - 0.25).abs() < 1e-9 && (g[2] - 0.25).abs() < 1e-9);
    }

    #[test]
    fn shared_input_gradients_accumulate() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![3.0]));
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }
}
