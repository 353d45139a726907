use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeom};
use super::{numel, Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dAttrs {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dAttrs {
    fn default() -> Self {
        Conv2dAttrs {
            stride: 1,
            padding: 0,
        }
    }
}

pub enum Targets<'a, T> {
    Indices(&'a [usize]),
    Probs(&'a [T]),
}

enum Op<T> {
    Leaf,
    /// Result of operations none of whose inputs require a gradient.
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    BiasAdd {
        x: Var,
        bias: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Relu(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    GlobalAvgPool(Var),
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<T>,
    },
    SoftmaxMse {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<T>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Per-channel batch statistics produced by a training-mode batchnorm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running-statistic updates.
    pub var: Vec<T>,
}

/// Ordered record of differentiable operations.
///
/// Nodes are appended as operations execute, so the node list is already a
/// topological order and `backward` walks it once, last to first.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [r, c] => (*r, *c),
        _ => (0, 0),
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tensor as a leaf; it receives gradients iff `requires_grad`.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.data().to_vec(),
            op: Op::Leaf,
            requires_grad: tensor.requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(Error::invalid(
                "leaf",
                format!("shape {shape:?} needs {} values, got {}", numel(&shape), value.len()),
            ));
        }
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the most recent `backward` (accumulated for leaves).
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        let mut t = Tensor::new(node.shape.clone(), node.value.clone()).expect("node shape");
        if let Some(g) = &node.grad {
            t.accumulate_grad(g);
        }
        t
    }

    pub fn clear_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op: if requires_grad { op } else { Op::Constant },
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * factor).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, factor), &[a])
    }

    /// Adds a length-`C` bias along axis 1 of an `N x C x ...` tensor.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(bias) != [shape[1]] {
            return Err(Error::ShapeMismatch {
                op: "bias_add",
                lhs: shape,
                rhs: self.shape(bias).to_vec(),
            });
        }
        let inner: usize = shape[2..].iter().product();
        let c = shape[1];
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for (i, chunk) in out.chunks_exact_mut(inner).enumerate() {
            let bi = b[i % c];
            chunk.iter_mut().for_each(|v| *v += bi);
        }
        Ok(self.push(shape, out, Op::BiasAdd { x, bias }, &[x, bias]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rows_cols(self.shape(a));
        let (k2, n) = rows_cols(self.shape(b));
        if self.shape(a).len() != 2 || self.shape(b).len() != 2 || k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m, k, n, T::one(), self.value(a), k as isize, 1, self.value(b), n as isize, 1, T::zero(),
            &mut out, n as isize, 1,
        );
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// 2-D convolution: NCHW input, OIHW kernel, zero padding, no bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, attrs: Conv2dAttrs) -> Result<Var> {
        let (is, ks) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: is.clone(),
            rhs: ks.clone(),
        };
        if is.len() != 4 || ks.len() != 4 || is[1] != ks[1] || attrs.stride == 0 {
            return Err(mismatch());
        }
        let (n, c, h, w) = (is[0], is[1], is[2], is[3]);
        let (o, kh, kw) = (ks[0], ks[2], ks[3]);
        if h + 2 * attrs.padding < kh || w + 2 * attrs.padding < kw {
            return Err(mismatch());
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride: attrs.stride,
            pad: attrs.padding,
            oh: (h + 2 * attrs.padding - kh) / attrs.stride + 1,
            ow: (w + 2 * attrs.padding - kw) / attrs.stride + 1,
        };
        let (out, cols) = kernels::conv2d_forward(self.value(input), self.value(kernel), &geom);
        let keep = self.requires_grad(kernel) || self.requires_grad(input);
        let op = Op::Conv2d {
            input,
            kernel,
            geom,
            cols: if keep { cols } else { Vec::new() },
        };
        Ok(self.push(vec![n, o, geom.oh, geom.ow], out, op, &[input, kernel]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), &[x])
    }

    /// Batch normalization over axes (0, 2, 3) of an NCHW tensor.
    ///
    /// With `running = None` batch statistics are used and returned; otherwise
    /// the given `(mean, var)` running statistics normalize the input.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 || self.shape(gamma) != [shape[1]] || self.shape(beta) != [shape[1]] {
            return Err(Error::ShapeMismatch {
                op: "batchnorm2d",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        let count = n * plane;
        let x = self.value(input);
        let eps = T::from_f64_lossy(eps);
        let (mean, var_biased, stats) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::invalid("batchnorm2d", "running statistics length"));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        let start = (b * c + ch) * plane;
                        for &v in &x[start..start + plane] {
                            s += v;
                        }
                    }
                    let m = s / T::from_usize(count).unwrap();
                    let mut sq = T::zero();
                    for b in 0..n {
                        let start = (b * c + ch) * plane;
                        for &v in &x[start..start + plane] {
                            sq += (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = sq / T::from_usize(count).unwrap();
                }
                let unbiased = var
                    .iter()
                    .map(|&v| {
                        if count > 1 {
                            v * T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
                        } else {
                            v
                        }
                    })
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma);
        let bt = self.value(beta);
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let start = (b * c + ch) * plane;
                for i in start..start + plane {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let op = Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats: running.is_none(),
        };
        Ok((self.push(shape, out, op, &[input, gamma, beta]), stats))
    }

    /// Mean over the spatial axes: `N x C x H x W -> N x C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::invalid("global_avg_pool", format!("expected NCHW, got {shape:?}")));
        }
        let plane = shape[2] * shape[3];
        let denom = T::from_usize(plane).unwrap();
        let out = self
            .value(x)
            .chunks_exact(plane)
            .map(|c| c.iter().copied().sum::<T>() / denom)
            .collect();
        Ok(self.push(vec![shape[0], shape[1]], out, Op::GlobalAvgPool(x), &[x]))
    }

    /// Max pooling with a square window and no padding.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || kernel == 0 || stride == 0 || shape[2] < kernel || shape[3] < kernel {
            return Err(Error::ShapeMismatch {
                op: "max_pool2d",
                lhs: shape,
                rhs: vec![kernel, kernel],
            });
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut arg = Vec::with_capacity(n * c * oh * ow);
        for nc in 0..n * c {
            let base = nc * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    arg.push(best);
                }
            }
        }
        let op = Op::MaxPool2d { input: x, argmax: arg };
        Ok(self.push(vec![n, c, oh, ow], out, op, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), &[x]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let width = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * width..(o + 1) * width]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        Ok(self.push(new_shape, out, Op::Narrow { input: x, axis, start }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push(vec![], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).len().max(1)).unwrap();
        let s = self.value(x).iter().copied().sum::<T>() / n;
        self.push(vec![], vec![s], Op::Mean(x), &[x])
    }

    fn target_rows(&self, op: &'static str, logits: Var, targets: Targets<'_, T>) -> Result<Vec<T>> {
        let shape = self.shape(logits);
        let (n, k) = rows_cols(shape);
        if shape.len() != 2 || n == 0 {
            return Err(Error::invalid(op, format!("logits must be N x K with N >= 1, got {shape:?}")));
        }
        if self.value(logits).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{op} logits")));
        }
        match targets {
            Targets::Indices(idx) => {
                if idx.len() != n {
                    return Err(Error::ShapeMismatch {
                        op,
                        lhs: shape.to_vec(),
                        rhs: vec![idx.len()],
                    });
                }
                let mut t = vec![T::zero(); n * k];
                for (i, &c) in idx.iter().enumerate() {
                    if c >= k {
                        return Err(Error::invalid(op, format!("class index {c} >= {k}")));
                    }
                    t[i * k + c] = T::one();
                }
                Ok(t)
            }
            Targets::Probs(p) => {
                if p.len() != n * k {
                    return Err(Error::ShapeMismatch {
                        op,
                        lhs: shape.to_vec(),
                        rhs: vec![p.len()],
                    });
                }
                for row in p.chunks_exact(k) {
                    let s: f64 = row.iter().map(|v| v.as_f64()).sum();
                    if (s - 1.0).abs() > 1e-4 || row.iter().any(|v| v.as_f64() < -1e-12) {
                        return Err(Error::invalid(op, format!("target row sums to {s}, expected 1")));
                    }
                }
                Ok(p.to_vec())
            }
        }
    }

    /// Mean over rows of `-sum_k t_k log softmax(z)_k`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Targets<'_, T>) -> Result<Var> {
        let t = self.target_rows("softmax_cross_entropy", logits, targets)?;
        let (n, k) = rows_cols(self.shape(logits));
        let rows = kernels::cross_entropy_rows(self.value(logits), &t, k);
        let loss = rows.iter().sum::<f64>() / n as f64;
        let probs = kernels::softmax_rows(self.value(logits), k);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            probs,
            targets: t,
        };
        Ok(self.push(vec![], vec![T::from_f64_lossy(loss)], op, &[logits]))
    }

    /// Mean over all `N x K` entries of `(softmax(z) - q)^2`.
    pub fn softmax_mse(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let t = self.target_rows("softmax_mse", logits, Targets::Probs(targets))?;
        let (_, k) = rows_cols(self.shape(logits));
        let probs = kernels::softmax_rows(self.value(logits), k);
        let total: f64 = probs
            .iter()
            .zip(&t)
            .map(|(&p, &q)| (p.as_f64() - q.as_f64()).powi(2))
            .sum();
        let loss = total / probs.len() as f64;
        let op = Op::SoftmaxMse {
            logits,
            probs,
            targets: t,
        };
        Ok(self.push(vec![], vec![T::from_f64_lossy(loss)], op, &[logits]))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Leaf gradients accumulate across calls; interior gradients hold the
    /// values of the latest sweep.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            match node.op {
                Op::Leaf => match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
                    None => node.grad = Some(g),
                },
                _ => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                send(*a, g.iter().zip(bv).map(|(&d, &y)| d * y).collect());
                send(*b, g.iter().zip(av).map(|(&d, &x)| d * x).collect());
            }
            Op::Scale(a, f) => send(*a, g.iter().map(|&d| d * *f).collect()),
            Op::BiasAdd { x, bias } => {
                send(*x, g.to_vec());
                let shape = &node.shape;
                let c = shape[1];
                let inner: usize = shape[2..].iter().product();
                let mut db = vec![T::zero(); c];
                for (j, chunk) in g.chunks_exact(inner).enumerate() {
                    db[j % c] += chunk.iter().copied().sum::<T>();
                }
                send(*bias, db);
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.nodes[a.0].requires_grad {
                    // dA = G @ B^T
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(
                        m, n, k, T::one(), g, n as isize, 1, self.value(*b), 1, n as isize, T::zero(),
                        &mut da, k as isize, 1,
                    );
                    send(*a, da);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = A^T @ G
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(
                        k, m, n, T::one(), self.value(*a), 1, k as isize, g, n as isize, 1, T::zero(),
                        &mut db, n as isize, 1,
                    );
                    send(*b, db);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let (dx, dk) = kernels::conv2d_backward(
                    g,
                    self.value(*kernel),
                    cols,
                    geom,
                    self.nodes[input.0].requires_grad,
                    self.nodes[kernel.0].requires_grad,
                );
                if let Some(dx) = dx {
                    send(*input, dx);
                }
                if let Some(dk) = dk {
                    send(*kernel, dk);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                send(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                        .collect(),
                );
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = &node.shape;
                let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                let gam = self.value(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let start = (b * c + ch) * plane;
                        for idx in start..start + plane {
                            dgamma[ch] += g[idx] * xhat[idx];
                            dbeta[ch] += g[idx];
                        }
                    }
                }
                if self.nodes[input.0].requires_grad {
                    let mut dx = vec![T::zero(); g.len()];
                    let m = T::from_usize(n * plane).unwrap();
                    for b in 0..n {
                        for ch in 0..c {
                            let start = (b * c + ch) * plane;
                            let scale = gam[ch] * inv_std[ch];
                            for idx in start..start + plane {
                                dx[idx] = if *batch_stats {
                                    // dxhat = g*gamma; dx = inv_std/m * (m*dxhat - sum dxhat - xhat*sum dxhat*xhat)
                                    scale * (g[idx] - dbeta[ch] / m - xhat[idx] * dgamma[ch] / m)
                                } else {
                                    scale * g[idx]
                                };
                            }
                        }
                    }
                    send(*input, dx);
                }
                send(*gamma, dgamma);
                send(*beta, dbeta);
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let plane = xs[2] * xs[3];
                let denom = T::from_usize(plane).unwrap();
                let mut dx = Vec::with_capacity(g.len() * plane);
                for &d in g {
                    dx.extend(std::iter::repeat(d / denom).take(plane));
                }
                send(*x, dx);
            }
            Op::MaxPool2d { input, argmax } => {
                let mut dx = vec![T::zero(); self.value(*input).len()];
                for (&d, &src) in g.iter().zip(argmax) {
                    dx[src] += d;
                }
                send(*input, dx);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Concat { inputs, axis } => {
                let shape = &node.shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut parts: Vec<Vec<T>> = inputs
                    .iter()
                    .map(|v| Vec::with_capacity(self.value(*v).len()))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (p, v) in parts.iter_mut().zip(inputs) {
                        let width = self.shape(*v)[*axis] * inner;
                        p.extend_from_slice(&g[pos..pos + width]);
                        pos += width;
                    }
                }
                for (v, p) in inputs.iter().zip(parts) {
                    send(*v, p);
                }
            }
            Op::Narrow { input, axis, start } => {
                let src = self.shape(*input);
                let outer: usize = src[..*axis].iter().product();
                let inner: usize = src[axis + 1..].iter().product();
                let len = node.shape[*axis];
                let mut dx = vec![T::zero(); self.value(*input).len()];
                for o in 0..outer {
                    let base = (o * src[*axis] + start) * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                send(*input, dx);
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                send(*x, vec![g[0] / T::from_usize(n.max(1)).unwrap(); n]);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let n = T::from_usize(self.shape(*logits)[0]).unwrap();
                let scale = g[0] / n;
                send(
                    *logits,
                    probs.iter().zip(targets).map(|(&p, &t)| (p - t) * scale).collect(),
                );
            }
            Op::SoftmaxMse {
                logits,
                probs,
                targets,
            } => {
                let k = self.shape(*logits)[1];
                let two = T::from_f64_lossy(2.0);
                let scale = g[0] * two / T::from_usize(probs.len()).unwrap();
                let mut dz = vec![T::zero(); probs.len()];
                for ((p, t), d) in probs
                    .chunks_exact(k)
                    .zip(targets.chunks_exact(k))
                    .zip(dz.chunks_exact_mut(k))
                {
                    let dp: Vec<T> = p.iter().zip(t).map(|(&pi, &ti)| (pi - ti) * scale).collect();
                    let dot: T = p.iter().zip(&dp).map(|(&pi, &di)| pi * di).sum();
                    for j in 0..k {
                        d[j] = p[j] * (dp[j] - dot);
                    }
                }
                send(*logits, dz);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape<f64>, shape: &[usize], v: &[f64]) -> Var {
        tape.leaf(&Tensor::from_f64(shape, v).unwrap().with_grad())
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[3], &[-1.0, 0.0, 2.0]);
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[1, 1, 3, 3], &[1.0; 9]);
        let k = leaf(&mut tape, &[1, 1, 3, 3], &[1.0; 9]);
        let y = tape.conv2d(x, k, Conv2dAttrs::default()).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y), &[9.0]);
    }

    #[test]
    fn batchnorm_two_values() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[2, 1, 1, 1], &[1.0, 3.0]);
        let g = leaf(&mut tape, &[1], &[1.0]);
        let b = leaf(&mut tape, &[1], &[0.0]);
        let (y, stats) = tape.batchnorm2d(x, g, b, None, 1e-5).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((tape.value(y)[0] + expect).abs() < 1e-12);
        assert!((tape.value(y)[1] - expect).abs() < 1e-12);
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var, vec![2.0]);
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = leaf(&mut tape, &[2, 3], &[0.0; 6]);
        let b = leaf(&mut tape, &[2, 3], &[0.0; 6]);
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = leaf(&mut tape, &[3], &[0.0; 3]);
        let err = tape.add(a, c).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn uniform_logits_cost_ln2() {
        let mut tape = Tape::<f64>::new();
        let z = leaf(&mut tape, &[1, 2], &[0.0, 0.0]);
        let l = tape.softmax_cross_entropy(z, Targets::Indices(&[0])).unwrap();
        assert!((tape.value(l)[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let z = leaf(&mut tape, &[1, 2], &[1000.0, 0.0]);
        let l = tape.softmax_cross_entropy(z, Targets::Indices(&[0])).unwrap();
        assert!(tape.value(l)[0].abs() < 1e-12);
    }

    #[test]
    fn non_finite_logits_rejected() {
        let mut tape = Tape::<f64>::new();
        let z = leaf(&mut tape, &[1, 2], &[f64::NAN, 0.0]);
        assert!(matches!(
            tape.softmax_cross_entropy(z, Targets::Indices(&[0])),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn product_rule_and_accumulation() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[], &[2.0]);
        let y = leaf(&mut tape, &[], &[3.0]);
        let z = tape.mul(x, y).unwrap();
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0]);
        assert_eq!(tape.grad(y).unwrap(), &[2.0]);
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
        tape.clear_grads();
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[2], &[1.0, 2.0]);
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_are_not_recorded_for_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap());
        let y = tape.relu(x);
        assert!(!tape.requires_grad(y));
    }
}
