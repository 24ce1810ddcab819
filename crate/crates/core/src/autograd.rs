//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to the [`Tape`]; node indices are therefore
//! already a topological order and [`Tape::backward`] walks them in reverse,
//! visiting each node once. Nodes whose inputs are all constants are marked as
//! not requiring gradients and are skipped during the backward sweep.
//!
//! Subgradient conventions at kinks: `sign(0) = +1` (so `|x|' = 1` at 0) and
//! `max`/`min` ties route the gradient to the first argument. `relu(x)` is
//! `max(x, 0)` and follows the same rule.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm_checked, numel, Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Arguments handed to a custom backward rule.
pub struct CustomGradCtx<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub upstream: &'a Tensor<T>,
}

/// User-supplied backward transform: one gradient per input, each shaped like
/// that input.
pub type CustomBackward<T> = Box<dyn Fn(&CustomGradCtx<'_, T>) -> Vec<Tensor<T>>>;

/// Operations accepted by [`Tape::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Maximum,
    Minimum,
    Neg,
    Abs,
    Scale(f64),
    Relu,
    MatMul,
    Transpose,
    Conv2d { stride: usize, padding: usize },
    MaxPool2d { kernel: usize, stride: usize },
    LogSoftmax,
    Sum,
    Mean,
    Reshape(Vec<usize>),
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

enum Rule<T> {
    Leaf,
    Untaped,
    Add,
    Sub,
    Mul,
    Div,
    Maximum,
    Minimum,
    Neg,
    Abs,
    Scale(T),
    Relu,
    MatMul,
    Transpose,
    Conv2d { geom: ConvGeom, cols: Vec<T> },
    MaxPool2d { argmax: Vec<usize> },
    BatchNorm { xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    LogSoftmax,
    Nll { targets: Vec<usize> },
    Sum,
    Mean,
    Reshape,
    Custom(CustomBackward<T>),
}

impl<T> Rule<T> {
    fn name(&self) -> &'static str {
        match self {
            Rule::Leaf => "leaf",
            Rule::Untaped => "untaped",
            Rule::Add => "add",
            Rule::Sub => "sub",
            Rule::Mul => "mul",
            Rule::Div => "div",
            Rule::Maximum => "maximum",
            Rule::Minimum => "minimum",
            Rule::Neg => "neg",
            Rule::Abs => "abs",
            Rule::Scale(_) => "scale",
            Rule::Relu => "relu",
            Rule::MatMul => "matmul",
            Rule::Transpose => "transpose",
            Rule::Conv2d { .. } => "conv2d",
            Rule::MaxPool2d { .. } => "maxpool2d",
            Rule::BatchNorm { .. } => "batchnorm",
            Rule::LogSoftmax => "log_softmax",
            Rule::Nll { .. } => "nll_loss",
            Rule::Sum => "sum",
            Rule::Mean => "mean",
            Rule::Reshape => "reshape",
            Rule::Custom(_) => "custom",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    rule: Rule<T>,
    requires_grad: bool,
    trainable: bool,
}

/// Batch statistics produced by a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance over the reduced axes.
    pub var: Vec<T>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

/// Gradients of a scalar root with respect to trainable leaves.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    taping: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    /// A tape that records backward rules.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            taping: true,
        }
    }

    /// A tape that only evaluates forward values. Backward over it fails.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            taping: false,
        }
    }

    pub fn is_taping(&self) -> bool {
        self.taping
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: `backward` reports a gradient for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Constant leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> Var {
        let trainable = trainable && self.taping;
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            rule: Rule::Leaf,
            requires_grad: trainable,
            trainable,
        });
        Var(self.nodes.len() - 1)
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

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], rule: Rule<T>) -> Var {
        let requires_grad = self.taping && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let (inputs, rule) = if self.taping {
            (inputs.to_vec(), rule)
        } else {
            (Vec::new(), Rule::Untaped)
        };
        self.nodes.push(Node {
            value,
            inputs,
            rule,
            requires_grad,
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Generic dispatch over the closed operation set.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let arity = match op {
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Maximum | Op::Minimum | Op::MatMul => 2,
            Op::Conv2d { .. } => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::invalid(format!(
                "{op:?} takes {arity} inputs, got {}",
                inputs.len()
            )));
        }
        match op {
            Op::Add => self.add(inputs[0], inputs[1]),
            Op::Sub => self.sub(inputs[0], inputs[1]),
            Op::Mul => self.mul(inputs[0], inputs[1]),
            Op::Div => self.div(inputs[0], inputs[1]),
            Op::Maximum => self.maximum(inputs[0], inputs[1]),
            Op::Minimum => self.minimum(inputs[0], inputs[1]),
            Op::Neg => Ok(self.neg(inputs[0])),
            Op::Abs => Ok(self.abs(inputs[0])),
            Op::Scale(c) => Ok(self.scale(inputs[0], T::lit(c))),
            Op::Relu => Ok(self.relu(inputs[0])),
            Op::MatMul => self.matmul(inputs[0], inputs[1]),
            Op::Transpose => self.transpose(inputs[0]),
            Op::Conv2d { stride, padding } => self.conv2d(inputs[0], inputs[1], stride, padding),
            Op::MaxPool2d { kernel, stride } => self.maxpool2d(inputs[0], kernel, stride),
            Op::LogSoftmax => self.log_softmax(inputs[0]),
            Op::Sum => Ok(self.sum(inputs[0])),
            Op::Mean => Ok(self.mean(inputs[0])),
            Op::Reshape(shape) => self.reshape(inputs[0], &shape),
        }
    }

    // ---- elementwise with broadcasting -------------------------------------------------

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        rule: Rule<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(va.shape().to_vec(), data)
        } else {
            let shape = broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| {
                Error::shape(
                    op,
                    format!("cannot broadcast {:?} with {:?}", va.shape(), vb.shape()),
                )
            })?;
            let sa = broadcast_strides(va.shape(), &shape);
            let sb = broadcast_strides(vb.shape(), &shape);
            let (da, db) = (va.data(), vb.data());
            let mut data = Vec::with_capacity(numel(&shape));
            walk(&shape, &sa, &sb, |_, ia, ib| data.push(f(da[ia], db[ib])));
            Tensor::from_parts(shape, data)
        };
        Ok(self.push(out, &[a, b], rule))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Rule::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Rule::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Rule::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Rule::Div, |x, y| x / y)
    }

    /// Elementwise maximum; ties select `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, Rule::Maximum, |x, y| if x >= y { x } else { y })
    }

    /// Elementwise minimum; ties select `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, Rule::Minimum, |x, y| if x <= y { x } else { y })
    }

    // ---- unary ---------------------------------------------------------------------

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x);
        self.push(out, &[a], Rule::Neg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.abs());
        self.push(out, &[a], Rule::Abs)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, &[a], Rule::Scale(c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|x| if x >= T::zero() { x } else { T::zero() });
        self.push(out, &[a], Rule::Relu)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, &[a], Rule::Reshape))
    }

    // ---- reductions ------------------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, &[a], Rule::Sum)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / T::lit(v.len() as f64));
        self.push(out, &[a], Rule::Mean)
    }

    // ---- linear algebra --------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (va.shape(), vb.shape()) else {
            return Err(Error::shape(
                "matmul",
                format!("expected 2-D operands, got {:?} and {:?}", va.shape(), vb.shape()),
            ));
        };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_checked(
            m,
            k,
            n,
            va.data(),
            (k as isize, 1),
            vb.data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        Ok(self.push(Tensor::from_parts(vec![m, n], out), &[a, b], Rule::MatMul))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let &[r, c] = va.shape() else {
            return Err(Error::shape(
                "transpose",
                format!("expected a 2-D operand, got {:?}", va.shape()),
            ));
        };
        let out = transpose2d(va.data(), r, c);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), &[a], Rule::Transpose))
    }

    /// 2-D convolution (cross-correlation) of `x: [N, C, H, W]` with
    /// `w: [K, C, kh, kw]`, zero padding on all sides.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let geom = conv_geom(vx.shape(), vw.shape(), stride, padding)?;
        let cols = im2col(vx.data(), &geom);
        let (rows, ncols) = (geom.rows(), geom.cols());
        let mut mat = vec![T::zero(); geom.k * ncols];
        gemm_checked(
            geom.k,
            rows,
            ncols,
            vw.data(),
            (rows as isize, 1),
            &cols,
            (ncols as isize, 1),
            T::zero(),
            &mut mat,
            (ncols as isize, 1),
        );
        // [K, N*P] -> [N, K, P]
        let p = geom.oh * geom.ow;
        let mut out = vec![T::zero(); mat.len()];
        for k in 0..geom.k {
            for n in 0..geom.n {
                out[(n * geom.k + k) * p..(n * geom.k + k + 1) * p]
                    .copy_from_slice(&mat[k * ncols + n * p..k * ncols + (n + 1) * p]);
            }
        }
        let value = Tensor::from_parts(vec![geom.n, geom.k, geom.oh, geom.ow], out);
        let cols = if self.taping { cols } else { Vec::new() };
        Ok(self.push(value, &[x, w], Rule::Conv2d { geom, cols }))
    }

    /// Max pooling over `[N, C, H, W]` without padding; ties pick the first
    /// position in row-major window order.
    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let vx = self.value(x);
        let &[n, c, h, w] = vx.shape() else {
            return Err(Error::shape(
                "maxpool2d",
                format!("expected [N, C, H, W], got {:?}", vx.shape()),
            ));
        };
        if kernel == 0 || stride == 0 || kernel > h || kernel > w {
            return Err(Error::shape(
                "maxpool2d",
                format!("kernel {kernel} stride {stride} invalid for {h}x{w} input"),
            ));
        }
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let data = vx.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..kernel {
                        let row = base + (oy * stride + ky) * w + ox * stride;
                        for idx in row..row + kernel {
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        Ok(self.push(value, &[x], Rule::MaxPool2d { argmax }))
    }

    /// Training-mode batch normalization over axis 1 of `[N, C]` or
    /// `[N, C, H, W]`, using the batch's own statistics.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let (n, c, inner) = self.bn_dims(x, gamma, beta)?;
        let data = self.value(x).data();
        let count = n * inner;
        let denom = T::lit(count as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                let off = (b * c + ch) * inner;
                s = s + data[off..off + inner].iter().copied().sum::<T>();
            }
            let mu = s / denom;
            let mut sq = T::zero();
            for b in 0..n {
                let off = (b * c + ch) * inner;
                for &v in &data[off..off + inner] {
                    sq = sq + (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = sq / denom;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std, n, c, inner);
        let var_out = self.push(
            y,
            &[x, gamma, beta],
            Rule::BatchNorm {
                xhat,
                inv_std,
                batch_stats: true,
            },
        );
        Ok((var_out, BatchStats { mean, var, count }))
    }

    /// Evaluation-mode batch normalization with fixed running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (n, c, inner) = self.bn_dims(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(
                "batchnorm",
                format!(
                    "running statistics have {} / {} channels, input has {c}",
                    running_mean.len(),
                    running_var.len()
                ),
            ));
        }
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let (y, xhat) = self.bn_apply(x, gamma, beta, running_mean, &inv_std, n, c, inner);
        Ok(self.push(
            y,
            &[x, gamma, beta],
            Rule::BatchNorm {
                xhat,
                inv_std,
                batch_stats: false,
            },
        ))
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        let (n, c, inner) = match *shape {
            [n, c] => (n, c, 1),
            [n, c, h, w] => (n, c, h * w),
            _ => {
                return Err(Error::shape(
                    "batchnorm",
                    format!("expected [N, C] or [N, C, H, W], got {shape:?}"),
                ))
            }
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batchnorm",
                format!(
                    "affine parameters {:?} / {:?} do not match {c} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok((n, c, inner))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
        n: usize,
        c: usize,
        inner: usize,
    ) -> (Tensor<T>, Vec<T>) {
        let vx = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let data = vx.data();
        let mut xhat = vec![T::zero(); data.len()];
        let mut y = vec![T::zero(); data.len()];
        for bi in 0..n {
            for ch in 0..c {
                let off = (bi * c + ch) * inner;
                for i in off..off + inner {
                    let h = (data[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    y[i] = g[ch] * h + b[ch];
                }
            }
        }
        let xhat = if self.taping { xhat } else { Vec::new() };
        (Tensor::from_parts(vx.shape().to_vec(), y), xhat)
    }

    // ---- classification heads --------------------------------------------------------

    /// Row-wise log-softmax of a `[N, C]` tensor.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let &[n, c] = vx.shape() else {
            return Err(Error::shape(
                "log_softmax",
                format!("expected [N, C], got {:?}", vx.shape()),
            ));
        };
        let data = vx.data();
        let mut out = vec![T::zero(); n * c];
        for r in 0..n {
            let row = &data[r * c..(r + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
            for (o, &v) in out[r * c..(r + 1) * c].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, c], out), &[x], Rule::LogSoftmax))
    }

    /// Mean negative log-likelihood of `targets` under row log-probabilities.
    pub fn nll_loss(&mut self, logp: Var, targets: &[usize]) -> Result<Var> {
        let v = self.value(logp);
        let &[n, c] = v.shape() else {
            return Err(Error::shape(
                "nll_loss",
                format!("expected [N, C], got {:?}", v.shape()),
            ));
        };
        if targets.len() != n {
            return Err(Error::shape(
                "nll_loss",
                format!("{} targets for {n} rows", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape(
                "nll_loss",
                format!("target {t} out of range for {c} classes"),
            ));
        }
        let data = v.data();
        let total: T = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -data[r * c + t])
            .sum();
        let out = Tensor::scalar(total / T::lit(n as f64));
        Ok(self.push(
            out,
            &[logp],
            Rule::Nll {
                targets: targets.to_vec(),
            },
        ))
    }

    /// Records an operation whose backward rule is supplied by the caller and
    /// applied verbatim.
    pub fn custom<F, B>(&mut self, inputs: &[Var], forward: F, backward: B) -> Result<Var>
    where
        F: FnOnce(&[&Tensor<T>]) -> Result<Tensor<T>>,
        B: Fn(&CustomGradCtx<'_, T>) -> Vec<Tensor<T>> + 'static,
    {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = forward(&values)?;
        Ok(self.push(out, inputs, Rule::Custom(Box::new(backward))))
    }

    // ---- backward --------------------------------------------------------------------

    /// Gradients of the scalar `root` with respect to every trainable leaf
    /// recorded before it. Leaves the root does not depend on get zeros.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if !self.taping {
            return Err(Error::Untaped);
        }
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_value.shape(), T::one()));
        let mut out = HashMap::new();
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if node.inputs.is_empty() {
                if node.trainable {
                    out.insert(Var(i), g);
                }
                continue;
            }
            let need: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = self.node_backward(node, &g, &need)?;
            for ((inp, ig), needed) in node.inputs.iter().zip(input_grads).zip(need) {
                let Some(ig) = ig else { continue };
                if !needed {
                    continue;
                }
                match &mut grads[inp.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(ig.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot => *slot = Some(ig),
                }
            }
        }
        for (i, node) in self.nodes[..=root.0].iter().enumerate() {
            if node.trainable {
                out.entry(Var(i))
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: out })
    }

    fn node_backward(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        need: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let input = |k: usize| self.value(node.inputs[k]);
        let gd = g.data();
        let res = match &node.rule {
            Rule::Leaf | Rule::Untaped => Vec::new(),
            Rule::Add | Rule::Sub | Rule::Mul | Rule::Div | Rule::Maximum | Rule::Minimum => {
                let (ga, gb) = binary_backward(&node.rule, input(0), input(1), g, node.value.shape());
                vec![Some(ga), Some(gb)]
            }
            Rule::Neg => vec![Some(g.map(|v| -v))],
            Rule::Abs => {
                let x = input(0);
                let d = x
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&xv, &gv)| if xv >= T::zero() { gv } else { -gv })
                    .collect();
                vec![Some(Tensor::from_parts(x.shape().to_vec(), d))]
            }
            Rule::Scale(c) => vec![Some(g.map(|v| v * *c))],
            Rule::Relu => {
                let x = input(0);
                let d = x
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&xv, &gv)| if xv >= T::zero() { gv } else { T::zero() })
                    .collect();
                vec![Some(Tensor::from_parts(x.shape().to_vec(), d))]
            }
            Rule::Reshape => vec![Some(Tensor::from_parts(
                input(0).shape().to_vec(),
                gd.to_vec(),
            ))],
            Rule::Sum => {
                let x = input(0);
                vec![Some(Tensor::full(x.shape(), gd[0]))]
            }
            Rule::Mean => {
                let x = input(0);
                vec![Some(Tensor::full(x.shape(), gd[0] / T::lit(x.len() as f64)))]
            }
            Rule::MatMul => {
                let (a, b) = (input(0), input(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let ga = need[0].then(|| {
                    let mut d = vec![T::zero(); m * k];
                    // g [m,n] * b^T [n,k]
                    gemm_checked(m, n, k, gd, (n as isize, 1), b.data(), (1, n as isize), T::zero(), &mut d, (k as isize, 1));
                    Tensor::from_parts(vec![m, k], d)
                });
                let gb = need[1].then(|| {
                    let mut d = vec![T::zero(); k * n];
                    // a^T [k,m] * g [m,n]
                    gemm_checked(k, m, n, a.data(), (1, k as isize), gd, (n as isize, 1), T::zero(), &mut d, (n as isize, 1));
                    Tensor::from_parts(vec![k, n], d)
                });
                vec![ga, gb]
            }
            Rule::Transpose => {
                let x = input(0);
                let (r, c) = (x.shape()[0], x.shape()[1]);
                vec![Some(Tensor::from_parts(vec![r, c], transpose2d(gd, c, r)))]
            }
            Rule::Conv2d { geom, cols } => {
                let (x, w) = (input(0), input(1));
                let (rows, ncols, p) = (geom.rows(), geom.cols(), geom.oh * geom.ow);
                // [N, K, P] -> [K, N*P]
                let mut gmat = vec![T::zero(); gd.len()];
                for k in 0..geom.k {
                    for n in 0..geom.n {
                        gmat[k * ncols + n * p..k * ncols + (n + 1) * p]
                            .copy_from_slice(&gd[(n * geom.k + k) * p..(n * geom.k + k + 1) * p]);
                    }
                }
                let gw = need[1].then(|| {
                    let mut d = vec![T::zero(); geom.k * rows];
                    gemm_checked(geom.k, ncols, rows, &gmat, (ncols as isize, 1), cols, (1, ncols as isize), T::zero(), &mut d, (rows as isize, 1));
                    Tensor::from_parts(w.shape().to_vec(), d)
                });
                let gx = need[0].then(|| {
                    let mut dcols = vec![T::zero(); rows * ncols];
                    gemm_checked(rows, geom.k, ncols, w.data(), (1, rows as isize), &gmat, (ncols as isize, 1), T::zero(), &mut dcols, (ncols as isize, 1));
                    Tensor::from_parts(x.shape().to_vec(), col2im(&dcols, geom))
                });
                vec![gx, gw]
            }
            Rule::MaxPool2d { argmax } => {
                let x = input(0);
                let mut d = vec![T::zero(); x.len()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    d[src] = d[src] + gv;
                }
                vec![Some(Tensor::from_parts(x.shape().to_vec(), d))]
            }
            Rule::BatchNorm {
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (x, gamma) = (input(0), input(1));
                let c = gamma.len();
                let n = x.shape()[0];
                let inner = x.len() / (n * c);
                let gam = gamma.data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * inner;
                        for i in off..off + inner {
                            sum_g[ch] = sum_g[ch] + gd[i];
                            sum_gx[ch] = sum_gx[ch] + gd[i] * xhat[i];
                        }
                    }
                }
                let gx = need[0].then(|| {
                    let mut d = vec![T::zero(); x.len()];
                    let m = T::lit((n * inner) as f64);
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * inner;
                            let s = gam[ch] * inv_std[ch];
                            for i in off..off + inner {
                                d[i] = if *batch_stats {
                                    s / m * (m * gd[i] - sum_g[ch] - xhat[i] * sum_gx[ch])
                                } else {
                                    s * gd[i]
                                };
                            }
                        }
                    }
                    Tensor::from_parts(x.shape().to_vec(), d)
                });
                vec![
                    gx,
                    Some(Tensor::from_parts(vec![c], sum_gx)),
                    Some(Tensor::from_parts(vec![c], sum_g)),
                ]
            }
            Rule::LogSoftmax => {
                let out = node.value.data();
                let (n, c) = (node.value.shape()[0], node.value.shape()[1]);
                let mut d = vec![T::zero(); n * c];
                for r in 0..n {
                    let s: T = gd[r * c..(r + 1) * c].iter().copied().sum();
                    for j in r * c..(r + 1) * c {
                        d[j] = gd[j] - out[j].exp() * s;
                    }
                }
                vec![Some(Tensor::from_parts(vec![n, c], d))]
            }
            Rule::Nll { targets } => {
                let x = input(0);
                let c = x.shape()[1];
                let scale = -gd[0] / T::lit(targets.len() as f64);
                let mut d = vec![T::zero(); x.len()];
                for (r, &t) in targets.iter().enumerate() {
                    d[r * c + t] = scale;
                }
                vec![Some(Tensor::from_parts(x.shape().to_vec(), d))]
            }
            Rule::Custom(backward) => {
                let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&v| self.value(v)).collect();
                let ctx = CustomGradCtx {
                    inputs: inputs.clone(),
                    output: &node.value,
                    upstream: g,
                };
                let grads = backward(&ctx);
                if grads.len() != inputs.len() {
                    return Err(Error::invalid(format!(
                        "custom backward returned {} gradients for {} inputs",
                        grads.len(),
                        inputs.len()
                    )));
                }
                for (i, (gr, inp)) in grads.iter().zip(&inputs).enumerate() {
                    if gr.shape() != inp.shape() {
                        return Err(Error::CustomGradShape {
                            input: i,
                            got: gr.shape().to_vec(),
                            expected: inp.shape().to_vec(),
                        });
                    }
                }
                grads.into_iter().map(Some).collect()
            }
        };
        debug_assert!(
            res.is_empty() || res.len() == node.inputs.len(),
            "{} returned wrong arity",
            node.rule.name()
        );
        Ok(res)
    }
}

// ---- helpers -----------------------------------------------------------------------

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` with broadcast axes striding 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every element of `shape` in row-major order, yielding the flat
/// output index and the offsets under the two stride sets.
fn walk(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob, mut o) = (0usize, 0usize, 0usize);
    loop {
        for j in 0..shape[last] {
            f(o, oa + j * sa[last], ob + j * sb[last]);
            o += 1;
        }
        let mut d = last;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

fn binary_backward<T: Element>(
    rule: &Rule<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    out_shape: &[usize],
) -> (Tensor<T>, Tensor<T>) {
    let mut ga = vec![T::zero(); a.len()];
    let mut gb = vec![T::zero(); b.len()];
    let (da, db, gd) = (a.data(), b.data(), g.data());
    let step = |o: usize, ia: usize, ib: usize, ga: &mut [T], gb: &mut [T]| {
        let (x, y, gv) = (da[ia], db[ib], gd[o]);
        match rule {
            Rule::Add => {
                ga[ia] = ga[ia] + gv;
                gb[ib] = gb[ib] + gv;
            }
            Rule::Sub => {
                ga[ia] = ga[ia] + gv;
                gb[ib] = gb[ib] - gv;
            }
            Rule::Mul => {
                ga[ia] = ga[ia] + gv * y;
                gb[ib] = gb[ib] + gv * x;
            }
            Rule::Div => {
                ga[ia] = ga[ia] + gv / y;
                gb[ib] = gb[ib] - gv * x / (y * y);
            }
            Rule::Maximum => {
                if x >= y {
                    ga[ia] = ga[ia] + gv;
                } else {
                    gb[ib] = gb[ib] + gv;
                }
            }
            Rule::Minimum => {
                if x <= y {
                    ga[ia] = ga[ia] + gv;
                } else {
                    gb[ib] = gb[ib] + gv;
                }
            }
            _ => unreachable!("not a binary rule"),
        }
    };
    if a.shape() == b.shape() {
        for o in 0..gd.len() {
            step(o, o, o, &mut ga, &mut gb);
        }
    } else {
        let sa = broadcast_strides(a.shape(), out_shape);
        let sb = broadcast_strides(b.shape(), out_shape);
        walk(out_shape, &sa, &sb, |o, ia, ib| step(o, ia, ib, &mut ga, &mut gb));
    }
    (
        Tensor::from_parts(a.shape().to_vec(), ga),
        Tensor::from_parts(b.shape().to_vec(), gb),
    )
}

fn transpose2d<T: Element>(data: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = data[i * c + j];
        }
    }
    out
}

fn conv_geom(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<ConvGeom> {
    let (&[n, c, h, wd], &[k, cw, kh, kw]) = (x, w) else {
        return Err(Error::shape(
            "conv2d",
            format!("expected input [N, C, H, W] and kernel [K, C, kh, kw], got {x:?} and {w:?}"),
        ));
    };
    if c != cw {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels, kernel expects {cw}"),
        ));
    }
    if stride == 0 || kh > h + 2 * padding || kw > wd + 2 * padding {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} (stride {stride}, padding {padding}) does not fit {h}x{wd} input"),
        ));
    }
    Ok(ConvGeom {
        n,
        c,
        h,
        w: wd,
        k,
        kh,
        kw,
        oh: (h + 2 * padding - kh) / stride + 1,
        ow: (wd + 2 * padding - kw) / stride + 1,
        stride,
        padding,
    })
}

/// Lays out receptive fields as a `[C*kh*kw, N*OH*OW]` matrix.
fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let ncols = g.cols();
    let p = g.oh * g.ow;
    let mut cols = vec![T::zero(); g.rows() * ncols];
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let plane = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let out_row = n * p + oy * g.ow;
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[out_row + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let ncols = g.cols();
    let p = g.oh * g.ow;
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let base = (n * g.c + c) * g.h * g.w;
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let in_row = base + iy as usize * g.w;
                        let col_row = n * p + oy * g.ow;
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.w as isize {
                                let dst = in_row + ix as usize;
                                x[dst] = x[dst] + src[col_row + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}
