use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use super::kernels::{self, Window};
use super::tensor::{Real, Tensor};
use super::KernelError;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The closed operator set. Every entry has a forward and a backward rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpCode {
    MatMul,
    Conv2d,
    Deconv2d,
    Add,
    Mul,
    Tanh,
    Sigmoid,
    Relu,
    SoftmaxLastDim,
    MseLoss,
    CrossEntropyLoss,
    Concat,
    Slice,
    Sum,
    Scale,
    Reshape,
    GaussianHeatmap,
}

impl OpCode {
    pub const ALL: [OpCode; 17] = [
        OpCode::MatMul,
        OpCode::Conv2d,
        OpCode::Deconv2d,
        OpCode::Add,
        OpCode::Mul,
        OpCode::Tanh,
        OpCode::Sigmoid,
        OpCode::Relu,
        OpCode::SoftmaxLastDim,
        OpCode::MseLoss,
        OpCode::CrossEntropyLoss,
        OpCode::Concat,
        OpCode::Slice,
        OpCode::Sum,
        OpCode::Scale,
        OpCode::Reshape,
        OpCode::GaussianHeatmap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpCode::MatMul => "matmul",
            OpCode::Conv2d => "conv2d",
            OpCode::Deconv2d => "deconv2d",
            OpCode::Add => "add",
            OpCode::Mul => "mul",
            OpCode::Tanh => "tanh",
            OpCode::Sigmoid => "sigmoid",
            OpCode::Relu => "relu",
            OpCode::SoftmaxLastDim => "softmax_lastdim",
            OpCode::MseLoss => "mse_loss",
            OpCode::CrossEntropyLoss => "cross_entropy_loss",
            OpCode::Concat => "concat",
            OpCode::Slice => "slice",
            OpCode::Sum => "sum",
            OpCode::Scale => "scale",
            OpCode::Reshape => "reshape",
            OpCode::GaussianHeatmap => "gaussian_heatmap",
        }
    }
}

impl fmt::Display for OpCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpCode {
    type Err = KernelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpCode::ALL.iter().copied().find(|op| op.name() == s).ok_or_else(|| KernelError::UnknownOpcode(s.to_string()))
    }
}

/// Operator-specific attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Attrs {
    None,
    Conv {
        stride: usize,
        padding: usize,
    },
    Deconv {
        stride: usize,
        padding: usize,
        output_padding: usize,
    },
    /// Range along the last axis.
    Slice {
        start: usize,
        len: usize,
    },
    Scale(f64),
    Reshape(Vec<usize>),
    /// Gaussian blobs on a `height x width` grid spanning `[-1, 1]^2`;
    /// `sigma` is in the same normalized units.
    Heatmap {
        height: usize,
        width: usize,
        sigma: f64,
    },
}

struct Recorded<T> {
    code: OpCode,
    inputs: Vec<Var>,
    attrs: Attrs,
    saved: Option<Vec<T>>,
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    requires_grad: bool,
    op: Option<Recorded<T>>,
}

/// Operation tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    /// Drop every node and gradient. Previously issued [`Var`]s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Arc<Tensor<T>>, requires_grad: bool, op: Option<Recorded<T>>) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Arc::new(value), requires_grad, None)
    }

    /// Trainable leaf sharing storage with the caller.
    pub fn param(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.push(value, true, None)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Arc::new(value), false, None)
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.push(value, false, None)
    }

    /// Same value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Arc::clone(&self.nodes[v.0].value);
        self.push(value, false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shared(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Graph::backward`] target with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn apply(&mut self, code: OpCode, inputs: &[Var], attrs: Attrs) -> Result<Var, KernelError> {
        for v in inputs {
            if v.0 >= self.nodes.len() {
                return Err(KernelError::UnknownVar(v.0));
            }
        }
        let (value, saved) = {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &*self.nodes[v.0].value).collect();
            forward(code, &vals, &attrs)?
        };
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = requires_grad.then(|| Recorded { code, inputs: inputs.to_vec(), attrs, saved });
        Ok(self.push(Arc::new(value), requires_grad, op))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.apply(OpCode::MatMul, &[a, b], Attrs::None)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var, KernelError> {
        self.apply(OpCode::Conv2d, &[x, w, b], Attrs::Conv { stride, padding })
    }

    pub fn deconv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var, KernelError> {
        self.apply(OpCode::Deconv2d, &[x, w, b], Attrs::Deconv { stride, padding, output_padding })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.apply(OpCode::Add, &[a, b], Attrs::None)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.apply(OpCode::Mul, &[a, b], Attrs::None)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, KernelError> {
        self.apply(OpCode::Tanh, &[x], Attrs::None)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, KernelError> {
        self.apply(OpCode::Sigmoid, &[x], Attrs::None)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, KernelError> {
        self.apply(OpCode::Relu, &[x], Attrs::None)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, KernelError> {
        self.apply(OpCode::SoftmaxLastDim, &[x], Attrs::None)
    }

    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var, KernelError> {
        self.apply(OpCode::MseLoss, &[pred, target], Attrs::None)
    }

    /// Mean over rows of `-sum(target * log_softmax(logits))`.
    pub fn cross_entropy(&mut self, logits: Var, target: Var) -> Result<Var, KernelError> {
        self.apply(OpCode::CrossEntropyLoss, &[logits, target], Attrs::None)
    }

    /// Concatenate along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, KernelError> {
        self.apply(OpCode::Concat, parts, Attrs::None)
    }

    /// Sub-range of the last axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var, KernelError> {
        self.apply(OpCode::Slice, &[x], Attrs::Slice { start, len })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, KernelError> {
        self.apply(OpCode::Sum, &[x], Attrs::None)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, KernelError> {
        self.apply(OpCode::Scale, &[x], Attrs::Scale(factor))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, KernelError> {
        self.apply(OpCode::Reshape, &[x], Attrs::Reshape(shape.to_vec()))
    }

    pub fn gaussian_heatmap(
        &mut self,
        points: Var,
        height: usize,
        width: usize,
        sigma: f64,
    ) -> Result<Var, KernelError> {
        self.apply(OpCode::GaussianHeatmap, &[points], Attrs::Heatmap { height, width, sigma })
    }

    /// Reverse sweep from a scalar. Fills gradients of every reachable leaf
    /// that requires them; interior gradients are released as soon as they
    /// have been propagated.
    pub fn backward(&mut self, loss: Var) -> Result<(), KernelError> {
        let node = self.nodes.get(loss.0).ok_or(KernelError::UnknownVar(loss.0))?;
        if node.value.numel() != 1 {
            return Err(KernelError::NonScalarLoss(node.value.shape().to_vec()));
        }
        if node.op.is_none() {
            return Err(KernelError::NoGraph);
        }
        let Graph { nodes, grads } = self;
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &nodes[idx].op {
                Some(rec) => backward_op(nodes, grads, rec, &nodes[idx].value, &g),
                None => grads[idx] = Some(g),
            }
        }
        Ok(())
    }
}

fn shape_err(op: OpCode, detail: impl Into<String>) -> KernelError {
    KernelError::Shape { op, detail: detail.into() }
}

fn attr_err(op: OpCode, detail: impl Into<String>) -> KernelError {
    KernelError::Attrs { op, detail: detail.into() }
}

fn arity(op: OpCode, inputs: &[&impl Sized], expected: usize) -> Result<(), KernelError> {
    if inputs.len() != expected {
        return Err(KernelError::Arity { op, expected, got: inputs.len() });
    }
    Ok(())
}

fn last_dim<T: Real>(t: &Tensor<T>) -> usize {
    *t.shape().last().unwrap_or(&1)
}

fn conv_window(op: OpCode, x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<Window, KernelError> {
    if x.len() != 3 || w.len() != 4 {
        return Err(shape_err(op, format!("input {x:?} must be [C,H,W], kernel {w:?} must be rank 4")));
    }
    if stride == 0 {
        return Err(attr_err(op, "stride must be >= 1"));
    }
    Ok(Window { channels: x[0], height: x[1], width: x[2], kh: w[2], kw: w[3], stride, padding })
}

type Forward<T> = (Tensor<T>, Option<Vec<T>>);

fn forward<T: Real>(code: OpCode, x: &[&Tensor<T>], attrs: &Attrs) -> Result<Forward<T>, KernelError> {
    let plain = |t: Tensor<T>| Ok((t, None));
    match code {
        OpCode::MatMul => {
            arity(code, x, 2)?;
            let (a, b) = (x[0].shape(), x[1].shape());
            if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
                return Err(shape_err(code, format!("cannot multiply {a:?} by {b:?}")));
            }
            let (m, k, n) = (a[0], a[1], b[1]);
            let mut out = vec![T::zero(); m * n];
            kernels::matmul_acc(&mut out, x[0].data(), x[1].data(), m, k, n);
            plain(Tensor::new(&[m, n], out)?)
        }
        OpCode::Conv2d => {
            arity(code, x, 3)?;
            let Attrs::Conv { stride, padding } = *attrs else {
                return Err(attr_err(code, "expected Conv attributes"));
            };
            let win = conv_window(code, x[0].shape(), x[1].shape(), stride, padding)?;
            let w = x[1].shape();
            if w[1] != win.channels {
                return Err(shape_err(
                    code,
                    format!("kernel expects {} input channels, input has {}", w[1], win.channels),
                ));
            }
            if x[2].numel() != w[0] {
                return Err(shape_err(code, format!("bias has {} entries for {} output channels", x[2].numel(), w[0])));
            }
            if win.height + 2 * padding < win.kh || win.width + 2 * padding < win.kw {
                return Err(shape_err(code, "kernel larger than padded input"));
            }
            let (co, k, n) = (w[0], win.patch_len(), win.positions());
            let cols = win.im2col(x[0].data());
            let mut out = vec![T::zero(); co * n];
            kernels::matmul_acc(&mut out, x[1].data(), &cols, co, k, n);
            for (o, row) in out.chunks_exact_mut(n).enumerate() {
                let b = x[2].data()[o];
                row.iter_mut().for_each(|v| *v = *v + b);
            }
            Ok((Tensor::new(&[co, win.out_height(), win.out_width()], out)?, Some(cols)))
        }
        OpCode::Deconv2d => {
            arity(code, x, 3)?;
            let Attrs::Deconv { stride, padding, output_padding } = *attrs else {
                return Err(attr_err(code, "expected Deconv attributes"));
            };
            let (win, ci) = deconv_window(code, x[0].shape(), x[1].shape(), stride, padding, output_padding)?;
            let co = win.channels;
            if x[2].numel() != co {
                return Err(shape_err(code, format!("bias has {} entries for {co} output channels", x[2].numel())));
            }
            let (ko, n) = (win.patch_len(), x[0].shape()[1] * x[0].shape()[2]);
            let mut cols = vec![T::zero(); ko * n];
            kernels::matmul_at_acc(&mut cols, x[1].data(), x[0].data(), ci, ko, n);
            let plane = win.height * win.width;
            let mut out = vec![T::zero(); co * plane];
            win.col2im_acc(&cols, &mut out);
            for (o, row) in out.chunks_exact_mut(plane).enumerate() {
                let b = x[2].data()[o];
                row.iter_mut().for_each(|v| *v = *v + b);
            }
            plain(Tensor::new(&[co, win.height, win.width], out)?)
        }
        OpCode::Add | OpCode::Mul => {
            arity(code, x, 2)?;
            if x[0].shape() != x[1].shape() {
                return Err(shape_err(code, format!("{:?} vs {:?}", x[0].shape(), x[1].shape())));
            }
            let out: Vec<T> = if code == OpCode::Add {
                x[0].data().iter().zip(x[1].data()).map(|(&a, &b)| a + b).collect()
            } else {
                x[0].data().iter().zip(x[1].data()).map(|(&a, &b)| a * b).collect()
            };
            plain(Tensor::new(x[0].shape(), out)?)
        }
        OpCode::Tanh | OpCode::Sigmoid | OpCode::Relu => {
            arity(code, x, 1)?;
            let src = x[0].data().iter();
            let out: Vec<T> = match code {
                OpCode::Tanh => src.map(|&v| v.tanh()).collect(),
                OpCode::Sigmoid => src.map(|&v| sigmoid(v)).collect(),
                _ => src.map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
            };
            plain(Tensor::new(x[0].shape(), out)?)
        }
        OpCode::SoftmaxLastDim => {
            arity(code, x, 1)?;
            let mut out = x[0].data().to_vec();
            for row in out.chunks_exact_mut(last_dim(x[0])) {
                softmax_in_place(row);
            }
            plain(Tensor::new(x[0].shape(), out)?)
        }
        OpCode::MseLoss => {
            arity(code, x, 2)?;
            if x[0].shape() != x[1].shape() {
                return Err(shape_err(code, format!("prediction {:?} vs target {:?}", x[0].shape(), x[1].shape())));
            }
            let n = T::of(x[0].numel() as f64);
            let diff: Vec<T> = x[0].data().iter().zip(x[1].data()).map(|(&p, &t)| p - t).collect();
            plain(Tensor::scalar(kernels::dot(&diff, &diff) / n))
        }
        OpCode::CrossEntropyLoss => {
            arity(code, x, 2)?;
            if x[0].shape() != x[1].shape() {
                return Err(shape_err(code, format!("logits {:?} vs target {:?}", x[0].shape(), x[1].shape())));
            }
            let width = last_dim(x[0]);
            let rows = x[0].numel() / width;
            let mut probs = x[0].data().to_vec();
            let mut lses = Vec::with_capacity(rows);
            let mut total = T::zero();
            for (r, row) in probs.chunks_exact_mut(width).enumerate() {
                let lse = softmax_in_place(row);
                let z = &x[0].data()[r * width..(r + 1) * width];
                let t = &x[1].data()[r * width..(r + 1) * width];
                let tz = kernels::dot(t, z);
                total = total + lse * kernels::sum(t) - tz;
                lses.push(lse);
            }
            probs.extend(lses);
            Ok((Tensor::scalar(total / T::of(rows as f64)), Some(probs)))
        }
        OpCode::Concat => {
            if x.is_empty() {
                return Err(KernelError::Arity { op: code, expected: 1, got: 0 });
            }
            let lead = &x[0].shape()[..x[0].rank() - 1];
            for t in x {
                if &t.shape()[..t.rank() - 1] != lead {
                    return Err(shape_err(code, format!("leading dims {:?} vs {:?}", lead, t.shape())));
                }
            }
            let rows: usize = lead.iter().product();
            let total: usize = x.iter().map(|t| last_dim(t)).sum();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for t in x {
                    let w = last_dim(t);
                    out.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            plain(Tensor::new(&shape, out)?)
        }
        OpCode::Slice => {
            arity(code, x, 1)?;
            let Attrs::Slice { start, len } = *attrs else {
                return Err(attr_err(code, "expected Slice attributes"));
            };
            let w = last_dim(x[0]);
            if len == 0 || start + len > w {
                return Err(shape_err(code, format!("range {start}..{} outside last dim {w}", start + len)));
            }
            let out: Vec<T> =
                x[0].data().chunks_exact(w).flat_map(|row| row[start..start + len].iter().copied()).collect();
            let mut shape = x[0].shape().to_vec();
            *shape.last_mut().unwrap() = len;
            plain(Tensor::new(&shape, out)?)
        }
        OpCode::Sum => {
            arity(code, x, 1)?;
            plain(Tensor::scalar(kernels::sum(x[0].data())))
        }
        OpCode::Scale => {
            arity(code, x, 1)?;
            let Attrs::Scale(f) = *attrs else {
                return Err(attr_err(code, "expected Scale attribute"));
            };
            let f = T::of(f);
            plain(Tensor::new(x[0].shape(), x[0].data().iter().map(|&v| v * f).collect())?)
        }
        OpCode::Reshape => {
            arity(code, x, 1)?;
            let Attrs::Reshape(shape) = attrs else {
                return Err(attr_err(code, "expected Reshape attribute"));
            };
            let numel: usize = shape.iter().product();
            if numel != x[0].numel() {
                return Err(shape_err(
                    code,
                    format!("{:?} has {} elements, target {shape:?} has {numel}", x[0].shape(), x[0].numel()),
                ));
            }
            plain(Tensor::new(shape, x[0].data().to_vec())?)
        }
        OpCode::GaussianHeatmap => {
            arity(code, x, 1)?;
            let Attrs::Heatmap { height, width, sigma } = *attrs else {
                return Err(attr_err(code, "expected Heatmap attributes"));
            };
            if height < 2 || width < 2 || sigma <= 0.0 {
                return Err(attr_err(code, "grid must be at least 2x2 and sigma positive"));
            }
            if !x[0].numel().is_multiple_of(2) {
                return Err(shape_err(code, format!("point vector of {} scalars is not (x,y) pairs", x[0].numel())));
            }
            let c = x[0].numel() / 2;
            let inv = T::of(-0.5 / (sigma * sigma));
            let gx = grid::<T>(width);
            let gy = grid::<T>(height);
            let mut out = Vec::with_capacity(c * height * width);
            for ch in 0..c {
                let (px, py) = (clamp_unit(x[0].data()[2 * ch]), clamp_unit(x[0].data()[2 * ch + 1]));
                for &yv in &gy {
                    let dy2 = (yv - py) * (yv - py);
                    for &xv in &gx {
                        out.push(((xv - px) * (xv - px) + dy2) * inv);
                    }
                }
            }
            out.iter_mut().for_each(|v| *v = v.exp());
            plain(Tensor::new(&[c, height, width], out)?)
        }
    }
}

fn deconv_window(
    op: OpCode,
    x: &[usize],
    w: &[usize],
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<(Window, usize), KernelError> {
    if x.len() != 3 || w.len() != 4 {
        return Err(shape_err(op, format!("input {x:?} must be [C,H,W], kernel {w:?} must be rank 4")));
    }
    if stride == 0 || output_padding >= stride {
        return Err(attr_err(op, "need stride >= 1 and output_padding < stride"));
    }
    if w[0] != x[0] {
        return Err(shape_err(op, format!("kernel expects {} input channels, input has {}", w[0], x[0])));
    }
    let span = |n: usize, k: usize| ((n - 1) * stride + k + output_padding).checked_sub(2 * padding);
    let (Some(h), Some(wd)) = (span(x[1], w[2]), span(x[2], w[3])) else {
        return Err(shape_err(op, "padding exceeds output extent"));
    };
    if h == 0 || wd == 0 {
        return Err(shape_err(op, "empty output"));
    }
    let win = Window { channels: w[1], height: h, width: wd, kh: w[2], kw: w[3], stride, padding };
    debug_assert_eq!((win.out_height(), win.out_width()), (x[1], x[2]));
    Ok((win, x[0]))
}

/// `n` points evenly spaced over `[-1, 1]`.
pub(crate) fn grid<T: Real>(n: usize) -> Vec<T> {
    (0..n).map(|i| T::of(-1.0 + 2.0 * i as f64 / (n - 1) as f64)).collect()
}

#[inline]
fn clamp_unit<T: Real>(v: T) -> T {
    v.max(-T::one()).min(T::one())
}

#[inline]
fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Softmax of one row in place; returns the row's log-sum-exp.
fn softmax_in_place<T: Real>(row: &mut [T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    row.iter_mut().for_each(|v| *v = (*v - m).exp());
    let s = kernels::sum(row);
    let inv = T::one() / s;
    row.iter_mut().for_each(|v| *v = *v * inv);
    m + s.ln()
}

fn accumulate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let n = nodes[v.0].value.numel();
    let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
    f(buf);
}

fn backward_op<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], rec: &Recorded<T>, out: &Tensor<T>, g: &[T]) {
    let inp = |i: usize| -> &Tensor<T> { &nodes[rec.inputs[i].0].value };
    let add_into = |buf: &mut [T], src: &[T]| {
        for (b, &s) in buf.iter_mut().zip(src) {
            *b = *b + s;
        }
    };
    match rec.code {
        OpCode::MatMul => {
            let (a, b) = (inp(0), inp(1));
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            accumulate(nodes, grads, rec.inputs[0], |da| kernels::matmul_bt_acc(da, g, b.data(), m, n, k));
            accumulate(nodes, grads, rec.inputs[1], |db| kernels::matmul_at_acc(db, a.data(), g, m, k, n));
        }
        OpCode::Conv2d => {
            let Attrs::Conv { stride, padding } = rec.attrs else { unreachable!() };
            let (x, w) = (inp(0), inp(1));
            let win = conv_window(rec.code, x.shape(), w.shape(), stride, padding).expect("validated in forward");
            let (co, k, n) = (w.shape()[0], win.patch_len(), win.positions());
            let cols = rec.saved.as_deref().expect("conv saves its columns");
            accumulate(nodes, grads, rec.inputs[1], |dw| kernels::matmul_bt_acc(dw, g, cols, co, n, k));
            accumulate(nodes, grads, rec.inputs[2], |db| {
                for (o, row) in g.chunks_exact(n).enumerate() {
                    db[o] = db[o] + kernels::sum(row);
                }
            });
            accumulate(nodes, grads, rec.inputs[0], |dx| {
                let mut dcols = vec![T::zero(); k * n];
                kernels::matmul_at_acc(&mut dcols, w.data(), g, co, k, n);
                win.col2im_acc(&dcols, dx);
            });
        }
        OpCode::Deconv2d => {
            let Attrs::Deconv { stride, padding, output_padding } = rec.attrs else { unreachable!() };
            let (x, w) = (inp(0), inp(1));
            let (win, ci) = deconv_window(rec.code, x.shape(), w.shape(), stride, padding, output_padding)
                .expect("validated in forward");
            let (ko, n) = (win.patch_len(), x.shape()[1] * x.shape()[2]);
            let plane = win.height * win.width;
            let needs_cols = nodes[rec.inputs[0].0].requires_grad || nodes[rec.inputs[1].0].requires_grad;
            if needs_cols {
                let dcols = win.im2col(g);
                accumulate(nodes, grads, rec.inputs[0], |dx| kernels::matmul_acc(dx, w.data(), &dcols, ci, ko, n));
                accumulate(nodes, grads, rec.inputs[1], |dw| kernels::matmul_bt_acc(dw, x.data(), &dcols, ci, n, ko));
            }
            accumulate(nodes, grads, rec.inputs[2], |db| {
                for (o, row) in g.chunks_exact(plane).enumerate() {
                    db[o] = db[o] + kernels::sum(row);
                }
            });
        }
        OpCode::Add => {
            accumulate(nodes, grads, rec.inputs[0], |d| add_into(d, g));
            accumulate(nodes, grads, rec.inputs[1], |d| add_into(d, g));
        }
        OpCode::Mul => {
            let (a, b) = (inp(0), inp(1));
            accumulate(nodes, grads, rec.inputs[0], |d| {
                for ((d, &gi), &bi) in d.iter_mut().zip(g).zip(b.data()) {
                    *d = *d + gi * bi;
                }
            });
            accumulate(nodes, grads, rec.inputs[1], |d| {
                for ((d, &gi), &ai) in d.iter_mut().zip(g).zip(a.data()) {
                    *d = *d + gi * ai;
                }
            });
        }
        OpCode::Tanh => accumulate(nodes, grads, rec.inputs[0], |d| {
            for ((d, &gi), &y) in d.iter_mut().zip(g).zip(out.data()) {
                *d = *d + gi * (T::one() - y * y);
            }
        }),
        OpCode::Sigmoid => accumulate(nodes, grads, rec.inputs[0], |d| {
            for ((d, &gi), &y) in d.iter_mut().zip(g).zip(out.data()) {
                *d = *d + gi * y * (T::one() - y);
            }
        }),
        OpCode::Relu => {
            let x = inp(0);
            accumulate(nodes, grads, rec.inputs[0], |d| {
                for ((d, &gi), &xi) in d.iter_mut().zip(g).zip(x.data()) {
                    if xi > T::zero() {
                        *d = *d + gi;
                    }
                }
            })
        }
        OpCode::SoftmaxLastDim => {
            let w = last_dim(out);
            accumulate(nodes, grads, rec.inputs[0], |d| {
                for ((drow, grow), yrow) in d.chunks_exact_mut(w).zip(g.chunks_exact(w)).zip(out.data().chunks_exact(w))
                {
                    let s = kernels::dot(grow, yrow);
                    for ((dj, &gj), &yj) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dj = *dj + yj * (gj - s);
                    }
                }
            });
        }
        OpCode::MseLoss => {
            let (p, t) = (inp(0), inp(1));
            let c = g[0] * T::of(2.0 / p.numel() as f64);
            accumulate(nodes, grads, rec.inputs[0], |d| {
                for ((d, &pi), &ti) in d.iter_mut().zip(p.data()).zip(t.data()) {
                    *d = *d + c * (pi - ti);
                }
            });
            accumulate(nodes, grads, rec.inputs[1], |d| {
                for ((d, &pi), &ti) in d.iter_mut().zip(p.data()).zip(t.data()) {
                    *d = *d - c * (pi - ti);
                }
            });
        }
        OpCode::CrossEntropyLoss => {
            let (z, t) = (inp(0), inp(1));
            let w = last_dim(z);
            let rows = z.numel() / w;
            let saved = rec.saved.as_ref().expect("cross-entropy saves probabilities");
            let (probs, lses) = saved.split_at(rows * w);
            let c = g[0] / T::of(rows as f64);
            accumulate(nodes, grads, rec.inputs[0], |d| {
                for r in 0..rows {
                    let span = r * w..(r + 1) * w;
                    let trow = &t.data()[span.clone()];
                    let tsum = kernels::sum(trow);
                    for ((dj, &pj), &tj) in d[span.clone()].iter_mut().zip(&probs[span.clone()]).zip(trow) {
                        *dj = *dj + c * (pj * tsum - tj);
                    }
                }
            });
            accumulate(nodes, grads, rec.inputs[1], |d| {
                for ((drow, zrow), &lse) in d.chunks_exact_mut(w).zip(z.data().chunks_exact(w)).zip(lses) {
                    for (dj, &zj) in drow.iter_mut().zip(zrow) {
                        *dj = *dj - c * (zj - lse);
                    }
                }
            });
        }
        OpCode::Concat => {
            let total = last_dim(out);
            let rows = out.numel() / total;
            let mut offset = 0;
            for &v in &rec.inputs {
                let w = last_dim(&nodes[v.0].value);
                accumulate(nodes, grads, v, |d| {
                    for r in 0..rows {
                        add_into(&mut d[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                    }
                });
                offset += w;
            }
        }
        OpCode::Slice => {
            let Attrs::Slice { start, len } = rec.attrs else { unreachable!() };
            let w = last_dim(inp(0));
            accumulate(nodes, grads, rec.inputs[0], |d| {
                for (drow, grow) in d.chunks_exact_mut(w).zip(g.chunks_exact(len)) {
                    add_into(&mut drow[start..start + len], grow);
                }
            });
        }
        OpCode::Sum => accumulate(nodes, grads, rec.inputs[0], |d| {
            d.iter_mut().for_each(|v| *v = *v + g[0]);
        }),
        OpCode::Scale => {
            let Attrs::Scale(f) = rec.attrs else { unreachable!() };
            let f = T::of(f);
            accumulate(nodes, grads, rec.inputs[0], |d| {
                for (d, &gi) in d.iter_mut().zip(g) {
                    *d = *d + gi * f;
                }
            });
        }
        OpCode::Reshape => accumulate(nodes, grads, rec.inputs[0], |d| add_into(d, g)),
        OpCode::GaussianHeatmap => {
            let Attrs::Heatmap { height, width, sigma } = rec.attrs else { unreachable!() };
            let pts = inp(0);
            let gx = grid::<T>(width);
            let gy = grid::<T>(height);
            let inv_s2 = T::of(1.0 / (sigma * sigma));
            let plane = height * width;
            accumulate(nodes, grads, rec.inputs[0], |d| {
                for ch in 0..pts.numel() / 2 {
                    let (rx, ry) = (pts.data()[2 * ch], pts.data()[2 * ch + 1]);
                    let (px, py) = (clamp_unit(rx), clamp_unit(ry));
                    let (mut sx, mut sy) = (T::zero(), T::zero());
                    let hrow = &out.data()[ch * plane..(ch + 1) * plane];
                    let grow = &g[ch * plane..(ch + 1) * plane];
                    for (i, &yv) in gy.iter().enumerate() {
                        for (j, &xv) in gx.iter().enumerate() {
                            let gh = grow[i * width + j] * hrow[i * width + j];
                            sx = sx + gh * (xv - px);
                            sy = sy + gh * (yv - py);
                        }
                    }
                    if rx.abs() <= T::one() {
                        d[2 * ch] = d[2 * ch] + sx * inv_s2;
                    }
                    if ry.abs() <= T::one() {
                        d[2 * ch + 1] = d[2 * ch + 1] + sy * inv_s2;
                    }
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn add_zero_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1.0, -2.0, 3.5, 0.25, 9.0, -7.0]));
        let z = g.constant(Tensor::zeros(&[2, 3]));
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn matmul_identity_is_identity() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..16).map(|i| (i as f64) * 0.37 - 2.0).collect();
        let x = g.constant(t(&[4, 4], &data));
        let i = g.constant(Tensor::identity(4));
        let y = g.matmul(x, i).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[4]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn shape_errors_name_the_opcode() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(matches!(err, KernelError::Shape { op: OpCode::MatMul, .. }));
        assert!(err.to_string().contains("matmul"));
        assert!(err.to_string().contains("[2, 3]"));

        let x = g.constant(Tensor::zeros(&[1, 8, 8]));
        let w = g.constant(Tensor::zeros(&[4, 2, 3, 3]));
        let bias = g.constant(Tensor::zeros(&[4]));
        assert!(matches!(g.conv2d(x, w, bias, 1, 1), Err(KernelError::Shape { op: OpCode::Conv2d, .. })));
        assert!(matches!(g.conv2d(x, w, bias, 0, 1), Err(KernelError::Attrs { .. })));
    }

    #[test]
    fn unknown_opcode_is_rejected() {
        assert!(matches!("gelu".parse::<OpCode>(), Err(KernelError::UnknownOpcode(_))));
        for op in OpCode::ALL {
            assert_eq!(op.name().parse::<OpCode>().unwrap(), op);
        }
    }

    #[test]
    fn mse_of_self_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[0.5, -1.0, 2.0]), true);
        let loss = g.mse_loss(x, x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.value(loss).data(), &[0.0]);
        assert_eq!(g.grad(x).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn sum_of_doubled_input_has_gradient_two() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]), true);
        let y = g.scale(x, 2.0).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0; 4]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = g.tanh(x).unwrap();
        assert_eq!(g.backward(y), Err(KernelError::NonScalarLoss(vec![2])));
        let c = g.constant(Tensor::scalar(1.0));
        assert_eq!(g.backward(c), Err(KernelError::NoGraph));
        let k = g.tanh(c).unwrap();
        assert_eq!(g.backward(k), Err(KernelError::NoGraph));
    }

    #[test]
    fn gradients_accumulate_across_branches() {
        let data = [0.3, -0.7, 1.1];
        let branch = |g: &mut Graph<f64>, x: Var, which: u8| -> Var {
            match which {
                0 => {
                    let y = g.tanh(x).unwrap();
                    g.sum(y).unwrap()
                }
                _ => {
                    let y = g.mul(x, x).unwrap();
                    g.sum(y).unwrap()
                }
            }
        };
        let single = |which: u8| -> Vec<f64> {
            let mut g = Graph::new();
            let x = g.leaf(t(&[3], &data), true);
            let l = branch(&mut g, x, which);
            g.backward(l).unwrap();
            g.grad(x).unwrap().to_vec()
        };
        let (g0, g1) = (single(0), single(1));
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &data), true);
        let a = branch(&mut g, x, 0);
        let b = branch(&mut g, x, 1);
        let l = g.add(a, b).unwrap();
        g.backward(l).unwrap();
        let both = g.grad(x).unwrap();
        for i in 0..3 {
            assert_eq!(both[i], g0[i] + g1[i]);
        }
    }

    #[test]
    fn constants_do_not_record() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::scalar(1.0));
        let b = g.tanh(a).unwrap();
        assert!(!g.requires_grad(b));
        let p = g.leaf(Tensor::scalar(1.0), true);
        let c = g.mul(b, p).unwrap();
        assert!(g.requires_grad(c));
    }

    #[test]
    fn deconv_output_extent() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[16, 16, 16]));
        let w = g.constant(Tensor::zeros(&[16, 8, 3, 3]));
        let b = g.constant(Tensor::full(&[8], 0.5));
        let y = g.deconv2d(x, w, b, 2, 1, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[8, 32, 32]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.5));
    }
}
