//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Every op reads earlier
//! nodes and pushes its result, so creation order is a topological order and
//! [`Graph::backward`] is a single reverse sweep. Leaves carry the
//! `requires_grad` flag of the tensor they were built from; gradients only
//! flow through nodes that (transitively) depend on such a leaf.

use crate::error::{Result, TensorError};
use crate::gemm::gemm;
use crate::tensor::{split_axis, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    AddBias(Var, Var),
    AddExpand(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    ConvTranspose1d {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    Norm {
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::BatchMatMul(a, b)
            | Op::AddBias(a, b)
            | Op::AddExpand(a, b)
            | Op::Mse(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::Softmax(a) => vec![*a],
            Op::Conv1d { x, w, b } | Op::ConvTranspose1d { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Norm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Slice { x, .. } => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Embedding { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss through a differentiable path.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, reason: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        reason: reason.into(),
    }
}

fn conv_im2col(x: &[f64], batch: usize, cin: usize, len: usize, k: usize) -> Vec<f64> {
    let lo = len + 1 - k;
    let cols = batch * lo;
    let mut col = vec![0.0; cin * k * cols];
    for b in 0..batch {
        for c in 0..cin {
            let src = &x[(b * cin + c) * len..(b * cin + c + 1) * len];
            for j in 0..k {
                let row = &mut col[(c * k + j) * cols + b * lo..(c * k + j) * cols + b * lo + lo];
                row.copy_from_slice(&src[j..j + lo]);
            }
        }
    }
    col
}

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Places `t` on the graph, honouring `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        self.check(v)?;
        let t = self.nodes[v.0].value.clone();
        Ok(self.constant(t))
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(invalid("graph", format!("node {} does not exist", v.0)));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary_same(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        self.value(a).same_shape(self.value(b), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let t = Tensor::new(x.shape(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "sub")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let t = Tensor::new(x.shape(), data)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let t = Tensor::new(x.shape(), data)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a).map(|x| s * x);
        Ok(self.push(t, Op::Scale(a, s)))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a)))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (x, y) = (self.value(a), self.value(b));
        let (xs, ys) = (x.shape(), y.shape());
        if xs.len() != 2 || ys.len() != 2 || xs[1] != ys[0] {
            return Err(shape_err("matmul", xs, ys));
        }
        let (m, k, n) = (xs[0], xs[1], ys[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, x.data(), false, y.data(), false, &mut out, 0.0);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (x, y) = (self.value(a), self.value(b));
        let (xs, ys) = (x.shape(), y.shape());
        if xs.len() != 3 || ys.len() != 3 || xs[0] != ys[0] || xs[2] != ys[1] {
            return Err(shape_err("batch_matmul", xs, ys));
        }
        let (bs, m, k, n) = (xs[0], xs[1], xs[2], ys[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &x.data()[i * m * k..(i + 1) * m * k],
                false,
                &y.data()[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let t = Tensor::new(&[bs, m, n], out)?;
        Ok(self.push(t, Op::BatchMatMul(a, b)))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let s = x.shape();
        if s.len() < 2 {
            return Err(invalid("transpose", "needs at least two axes"));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let outer = x.numel() / (r * c).max(1);
        let mut out = vec![0.0; x.numel()];
        for o in 0..outer {
            let base = o * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[base + j * r + i] = x.data()[base + i * c + j];
                }
            }
        }
        let mut shape = s.to_vec();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Adds `b: [n]` to every length-`n` row along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.check(x)?;
        self.check(b)?;
        let (xv, bv) = (self.value(x), self.value(b));
        let n = *xv.shape().last().unwrap_or(&1);
        if bv.shape() != [n] {
            return Err(shape_err("add_bias", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(bv.data()).for_each(|(p, q)| *p += q);
        }
        let t = Tensor::new(xv.shape(), data)?;
        Ok(self.push(t, Op::AddBias(x, b)))
    }

    /// Adds `e` (shape of `x` without its last axis) broadcast along the last
    /// axis of `x`, e.g. a per-channel offset `[B, C]` onto `[B, C, L]`.
    pub fn add_expand(&mut self, x: Var, e: Var) -> Result<Var> {
        self.check(x)?;
        self.check(e)?;
        let (xv, ev) = (self.value(x), self.value(e));
        let s = xv.shape();
        if s.is_empty() || ev.shape() != &s[..s.len() - 1] {
            return Err(shape_err("add_expand", s, ev.shape()));
        }
        let l = s[s.len() - 1];
        let mut data = xv.data().to_vec();
        for (row, off) in data.chunks_mut(l.max(1)).zip(ev.data()) {
            row.iter_mut().for_each(|p| *p += off);
        }
        let t = Tensor::new(s, data)?;
        Ok(self.push(t, Op::AddExpand(x, e)))
    }

    /// 1-D convolution, stride 1, no padding.
    ///
    /// `x: [B, Cin, L]`, `w: [Cout, Cin, K]`, `b: [Cout]` gives
    /// `[B, Cout, L - K + 1]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (xv, wv) = (self.value(x), self.value(w));
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] || xs[2] < ws[2] || ws[2] == 0 {
            return Err(shape_err("conv1d", xs, ws));
        }
        let (bs, cin, len) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        let lo = len + 1 - k;
        if let Some(b) = b {
            self.check(b)?;
            if self.value(b).shape() != [cout] {
                return Err(shape_err("conv1d bias", &[cout], self.value(b).shape()));
            }
        }
        let col = conv_im2col(xv.data(), bs, cin, len, k);
        let cols = bs * lo;
        let mut y = vec![0.0; cout * cols];
        gemm(cout, cin * k, cols, wv.data(), false, &col, false, &mut y, 0.0);
        let bias = b.map(|b| self.value(b).data());
        let mut out = vec![0.0; bs * cout * lo];
        for bi in 0..bs {
            for o in 0..cout {
                let off = bias.map(|v| v[o]).unwrap_or(0.0);
                for t in 0..lo {
                    out[(bi * cout + o) * lo + t] = y[o * cols + bi * lo + t] + off;
                }
            }
        }
        let t = Tensor::new(&[bs, cout, lo], out)?;
        Ok(self.push(t, Op::Conv1d { x, w, b }))
    }

    /// Transposed 1-D convolution, stride 1, no padding.
    ///
    /// `x: [B, Cin, L]`, `w: [Cin, Cout, K]`, `b: [Cout]` gives
    /// `[B, Cout, L + K - 1]`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (xv, wv) = (self.value(x), self.value(w));
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[0] || ws[2] == 0 {
            return Err(shape_err("conv_transpose1d", xs, ws));
        }
        let (bs, cin, len) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[1], ws[2]);
        let lout = len + k - 1;
        if let Some(b) = b {
            self.check(b)?;
            if self.value(b).shape() != [cout] {
                return Err(shape_err(
                    "conv_transpose1d bias",
                    &[cout],
                    self.value(b).shape(),
                ));
            }
        }
        let cols = bs * len;
        let xm = channels_major(xv.data(), bs, cin, len);
        let mut ycol = vec![0.0; cout * k * cols];
        gemm(cout * k, cin, cols, wv.data(), true, &xm, false, &mut ycol, 0.0);
        let bias = b.map(|b| self.value(b).data());
        let mut out = vec![0.0; bs * cout * lout];
        for bi in 0..bs {
            for o in 0..cout {
                let dst = &mut out[(bi * cout + o) * lout..(bi * cout + o + 1) * lout];
                if let Some(bias) = bias {
                    dst.iter_mut().for_each(|v| *v = bias[o]);
                }
                for j in 0..k {
                    let src = &ycol[(o * k + j) * cols + bi * len..(o * k + j) * cols + bi * len + len];
                    for t in 0..len {
                        dst[t + j] += src[t];
                    }
                }
            }
        }
        let t = Tensor::new(&[bs, cout, lout], out)?;
        Ok(self.push(t, Op::ConvTranspose1d { x, w, b }))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a).map(|x| x.max(0.0));
        Ok(self.push(t, Op::Relu(a)))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a).map(gelu);
        Ok(self.push(t, Op::Gelu(a)))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let n = *x.shape().last().ok_or_else(|| invalid("softmax", "scalar input"))?;
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            softmax_in_place(row);
        }
        let t = Tensor::new(x.shape(), data)?;
        Ok(self.push(t, Op::Softmax(a)))
    }

    /// Normalises `x` to zero mean and unit variance along `axis`, then
    /// applies per-position `gain` and `bias` (both of length `shape[axis]`).
    pub fn norm(&mut self, x: Var, gain: Var, bias: Var, axis: usize, eps: f64) -> Result<Var> {
        self.check(x)?;
        self.check(gain)?;
        self.check(bias)?;
        let xv = self.value(x);
        let s = xv.shape();
        if axis >= s.len() {
            return Err(invalid("norm", format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, n, inner) = split_axis(s, axis);
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.shape() != [n] || bv.shape() != [n] {
            return Err(shape_err("norm", &[n], gv.shape()));
        }
        let xd = xv.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; outer * inner];
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mean = (0..n).map(|j| xd[idx(j)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|j| (xd[idx(j)] - mean).powi(2)).sum::<f64>() / n as f64;
                let r = 1.0 / (var + eps).sqrt();
                rstd[o * inner + i] = r;
                for j in 0..n {
                    let h = (xd[idx(j)] - mean) * r;
                    xhat[idx(j)] = h;
                    out[idx(j)] = h * gv.data()[j] + bv.data()[j];
                }
            }
        }
        let t = Tensor::new(s, out)?;
        Ok(self.push(
            t,
            Op::Norm {
                x,
                gain,
                bias,
                axis,
                xhat,
                rstd,
            },
        ))
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let s = xv.shape();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(invalid(
                "slice",
                format!("range {start}..{end} on axis {axis} of {s:?}"),
            ));
        }
        let (outer, n, inner) = split_axis(s, axis);
        let m = end - start;
        let mut out = Vec::with_capacity(outer * m * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv.data()[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = m;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Slice { x, axis, start }))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        for &v in inputs {
            self.check(v)?;
        }
        let s0 = self.value(first).shape().to_vec();
        if axis >= s0.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {s0:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible = s.len() == s0.len()
                && s.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &s0, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let xv = self.value(v);
                let n = xv.shape()[axis];
                out.extend_from_slice(&xv.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Row lookup: `table: [V, d]` gives `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check(table)?;
        let tv = self.value(table);
        let s = tv.shape();
        if s.len() != 2 {
            return Err(invalid("embedding", format!("table must be 2-D, got {s:?}")));
        }
        let (v, d) = (s[0], s[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(invalid("embedding", format!("id {id} out of range {v}")));
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean squared error over all elements, as a scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.binary_same(pred, target, "mse")?;
        let (p, q) = (self.value(pred), self.value(target));
        let n = p.numel().max(1) as f64;
        let s = p
            .data()
            .iter()
            .zip(q.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / n;
        Ok(self.push(Tensor::scalar(s), Op::Mse(pred, target)))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`;
    /// `logits: [B, C]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let lv = self.value(logits);
        let s = lv.shape();
        if s.len() != 2 || s[0] != targets.len() || s[0] == 0 {
            return Err(invalid(
                "cross_entropy",
                format!("logits {s:?} vs {} targets", targets.len()),
            ));
        }
        let c = s[1];
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            if t >= c {
                return Err(invalid("cross_entropy", format!("target {t} >= {c}")));
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(row);
        }
        loss /= targets.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            for input in node.op.inputs() {
                if input.0 >= i {
                    return Err(TensorError::Cycle {
                        node: i,
                        input: input.0,
                    });
                }
            }
            let Some(g) = grads[i].take() else { continue };
            if node.requires_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        macro_rules! with_grad {
            ($v:expr, |$slot:ident| $body:expr) => {{
                let v: Var = $v;
                if wants(v) {
                    let len = self.nodes[v.0].value.numel();
                    let $slot: &mut Vec<f64> = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
                    $body
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                with_grad!(*a, |s| add_into(s, g));
                with_grad!(*b, |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |s| add_into(s, g));
                with_grad!(*b, |s| s.iter_mut().zip(g).for_each(|(p, q)| *p -= q));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                with_grad!(*a, |s| {
                    for ((p, q), y) in s.iter_mut().zip(g).zip(bv) {
                        *p += q * y;
                    }
                });
                with_grad!(*b, |s| {
                    for ((p, q), x) in s.iter_mut().zip(g).zip(av) {
                        *p += q * x;
                    }
                });
            }
            Op::Scale(a, k) => {
                with_grad!(*a, |s| s.iter_mut().zip(g).for_each(|(p, q)| *p += k * q));
            }
            Op::Sum(a) => {
                with_grad!(*a, |s| s.iter_mut().for_each(|p| *p += g[0]));
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                with_grad!(*a, |s| gemm(m, n, k, g, false, bv.data(), true, s, 1.0));
                with_grad!(*b, |s| gemm(k, m, n, av.data(), true, g, false, s, 1.0));
            }
            Op::BatchMatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bs, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
                with_grad!(*a, |s| {
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            true,
                            &mut s[i * m * k..(i + 1) * m * k],
                            1.0,
                        );
                    }
                });
                with_grad!(*b, |s| {
                    for i in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &av.data()[i * m * k..(i + 1) * m * k],
                            true,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &mut s[i * k * n..(i + 1) * k * n],
                            1.0,
                        );
                    }
                });
            }
            Op::Transpose(a) => {
                let os = node.value.shape();
                let (r, c) = (os[os.len() - 2], os[os.len() - 1]);
                let outer = g.len() / (r * c).max(1);
                with_grad!(*a, |s| {
                    for o in 0..outer {
                        let base = o * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                s[base + j * r + i] += g[base + i * c + j];
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                with_grad!(*a, |s| add_into(s, g));
            }
            Op::AddBias(x, b) => {
                let n = self.value(*b).numel();
                with_grad!(*x, |s| add_into(s, g));
                with_grad!(*b, |s| {
                    for row in g.chunks(n) {
                        add_into(s, row);
                    }
                });
            }
            Op::AddExpand(x, e) => {
                let l = *node.value.shape().last().unwrap();
                with_grad!(*x, |s| add_into(s, g));
                with_grad!(*e, |s| {
                    for (p, row) in s.iter_mut().zip(g.chunks(l.max(1))) {
                        *p += row.iter().sum::<f64>();
                    }
                });
            }
            Op::Conv1d { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (bs, cin, len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (cout, k) = (wv.shape()[0], wv.shape()[2]);
                let lo = len + 1 - k;
                let cols = bs * lo;
                // [B, Cout, Lo] -> [Cout, B*Lo]
                let mut dy = vec![0.0; cout * cols];
                for bi in 0..bs {
                    for o in 0..cout {
                        dy[o * cols + bi * lo..o * cols + bi * lo + lo]
                            .copy_from_slice(&g[(bi * cout + o) * lo..(bi * cout + o + 1) * lo]);
                    }
                }
                if let Some(b) = b {
                    with_grad!(*b, |s| {
                        for o in 0..cout {
                            s[o] += dy[o * cols..(o + 1) * cols].iter().sum::<f64>();
                        }
                    });
                }
                if wants(*w) {
                    let col = conv_im2col(xv.data(), bs, cin, len, k);
                    with_grad!(*w, |s| gemm(cout, cols, cin * k, &dy, false, &col, true, s, 1.0));
                }
                with_grad!(*x, |s| {
                    let mut dcol = vec![0.0; cin * k * cols];
                    gemm(cin * k, cout, cols, wv.data(), true, &dy, false, &mut dcol, 0.0);
                    for bi in 0..bs {
                        for c in 0..cin {
                            for j in 0..k {
                                let src = &dcol[(c * k + j) * cols + bi * lo..(c * k + j) * cols + bi * lo + lo];
                                let dst = &mut s[(bi * cin + c) * len + j..(bi * cin + c) * len + j + lo];
                                add_into(dst, src);
                            }
                        }
                    }
                });
            }
            Op::ConvTranspose1d { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (bs, cin, len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (cout, k) = (wv.shape()[1], wv.shape()[2]);
                let lout = len + k - 1;
                let cols = bs * len;
                if let Some(b) = b {
                    with_grad!(*b, |s| {
                        for bi in 0..bs {
                            for o in 0..cout {
                                s[o] += g[(bi * cout + o) * lout..(bi * cout + o + 1) * lout]
                                    .iter()
                                    .sum::<f64>();
                            }
                        }
                    });
                }
                // gather dOut into [Cout*K, B*L]
                let mut dycol = vec![0.0; cout * k * cols];
                for bi in 0..bs {
                    for o in 0..cout {
                        let src = &g[(bi * cout + o) * lout..(bi * cout + o + 1) * lout];
                        for j in 0..k {
                            dycol[(o * k + j) * cols + bi * len..(o * k + j) * cols + bi * len + len]
                                .copy_from_slice(&src[j..j + len]);
                        }
                    }
                }
                if wants(*w) {
                    let xm = channels_major(xv.data(), bs, cin, len);
                    with_grad!(*w, |s| gemm(cin, cols, cout * k, &xm, false, &dycol, true, s, 1.0));
                }
                with_grad!(*x, |s| {
                    let mut dxm = vec![0.0; cin * cols];
                    gemm(cin, cout * k, cols, wv.data(), false, &dycol, false, &mut dxm, 0.0);
                    for bi in 0..bs {
                        for c in 0..cin {
                            add_into(
                                &mut s[(bi * cin + c) * len..(bi * cin + c + 1) * len],
                                &dxm[c * cols + bi * len..c * cols + bi * len + len],
                            );
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                with_grad!(*a, |s| {
                    for ((p, q), x) in s.iter_mut().zip(g).zip(av) {
                        if *x > 0.0 {
                            *p += q;
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                with_grad!(*a, |s| {
                    for ((p, q), x) in s.iter_mut().zip(g).zip(av) {
                        *p += q * gelu_grad(*x);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                with_grad!(*a, |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                        for ((p, q), y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *p += y * (q - dot);
                        }
                    }
                });
            }
            Op::Norm {
                x,
                gain,
                bias,
                axis,
                xhat,
                rstd,
            } => {
                let s = node.value.shape();
                let (outer, n, inner) = split_axis(s, *axis);
                let gv = self.value(*gain).data();
                with_grad!(*gain, |sg| {
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                let idx = (o * n + j) * inner + i;
                                sg[j] += g[idx] * xhat[idx];
                            }
                        }
                    }
                });
                with_grad!(*bias, |sb| {
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                sb[j] += g[(o * n + j) * inner + i];
                            }
                        }
                    }
                });
                with_grad!(*x, |sx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..n {
                                let d = g[idx(j)] * gv[j];
                                m1 += d;
                                m2 += d * xhat[idx(j)];
                            }
                            m1 /= n as f64;
                            m2 /= n as f64;
                            let r = rstd[o * inner + i];
                            for j in 0..n {
                                let d = g[idx(j)] * gv[j];
                                sx[idx(j)] += r * (d - m1 - xhat[idx(j)] * m2);
                            }
                        }
                    }
                });
            }
            Op::Slice { x, axis, start } => {
                let xs = self.value(*x).shape();
                let (outer, n, inner) = split_axis(xs, *axis);
                let m = node.value.shape()[*axis];
                with_grad!(*x, |s| {
                    for o in 0..outer {
                        add_into(
                            &mut s[(o * n + start) * inner..(o * n + start + m) * inner],
                            &g[o * m * inner..(o + 1) * m * inner],
                        );
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let os = node.value.shape();
                let (outer, total, inner) = split_axis(os, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let n = self.value(v).shape()[*axis];
                    with_grad!(v, |s| {
                        for o in 0..outer {
                            add_into(
                                &mut s[o * n * inner..(o + 1) * n * inner],
                                &g[(o * total + offset) * inner..(o * total + offset + n) * inner],
                            );
                        }
                    });
                    offset += n;
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).shape()[1];
                with_grad!(*table, |s| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut s[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let k = 2.0 * g[0] / av.len().max(1) as f64;
                with_grad!(*a, |s| {
                    for ((p, x), y) in s.iter_mut().zip(av).zip(bv) {
                        *p += k * (x - y);
                    }
                });
                with_grad!(*b, |s| {
                    for ((p, x), y) in s.iter_mut().zip(av).zip(bv) {
                        *p -= k * (x - y);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).shape()[1];
                let k = g[0] / targets.len() as f64;
                with_grad!(*logits, |s| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            s[r * c + j] += k * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(p, q)| *p += q);
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// `[B, C, L] -> [C, B*L]`.
fn channels_major(x: &[f64], bs: usize, c: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let cols = bs * len;
    for bi in 0..bs {
        for ci in 0..c {
            out[ci * cols + bi * len..ci * cols + bi * len + len]
                .copy_from_slice(&x[(bi * c + ci) * len..(bi * c + ci + 1) * len]);
        }
    }
    out
}
