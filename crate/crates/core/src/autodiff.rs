//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation pushes one
//! node holding its forward value and the ids of its parents, so node order is
//! already a topological order: [`Graph::backward`] walks the arena once in
//! reverse and each node propagates its gradient to its parents exactly once.
//!
//! Gradients accumulate (sum) over every use of a node. A graph is meant to
//! live for one forward/backward pass and is confined to one thread; model
//! weights are copied in as leaves, so several graphs may share one set of
//! frozen weights concurrently.

use crate::error::{Error, Result};
use crate::tensor::{gemm, numel, Tensor};

/// Handle to a node in a [`Graph`].
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
    Relu(Var),
    Gelu(Var),
    Abs(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SoftmaxRows {
        x: Var,
        temperature: f64,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Im2col3x3 {
        x: Var,
        h: usize,
        w: usize,
        c: usize,
    },
    AvgPool2d {
        x: Var,
        window: usize,
        stride: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Abs(_) => "abs",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::LayerNorm { .. } => "layernorm",
            Op::Im2col3x3 { .. } => "im2col3x3",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    corrupt: Option<&'static str>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Index map from the elements of `a_shape` to the elements of a tensor of
/// `b_shape` broadcast onto it (numpy rules, `b` right-aligned, size-1 dims
/// repeat). `None` when the shapes are not broadcast-compatible.
fn broadcast_index(a_shape: &[usize], b_shape: &[usize]) -> Option<Vec<usize>> {
    if b_shape.len() > a_shape.len() {
        return None;
    }
    let lead = a_shape.len() - b_shape.len();
    for (i, &bd) in b_shape.iter().enumerate() {
        if bd != 1 && bd != a_shape[lead + i] {
            return None;
        }
    }
    let total = numel(a_shape);
    let nb = numel(b_shape);
    // Common case: b equals a suffix of a (bias rows).
    if b_shape == &a_shape[lead..] {
        return Some((0..total).map(|i| i % nb).collect());
    }
    let mut b_strides = vec![0usize; a_shape.len()];
    let mut acc = 1;
    for i in (0..b_shape.len()).rev() {
        if b_shape[i] != 1 {
            b_strides[lead + i] = acc;
        }
        acc *= b_shape[i];
    }
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; a_shape.len()];
    for _ in 0..total {
        map.push(idx.iter().zip(&b_strides).map(|(i, s)| i * s).sum());
        for d in (0..a_shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < a_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Some(map)
}

/// Splits `shape` around `axis` into (outer, axis, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    /// Test fixture: scales every gradient that flows through `op_name` by
    /// 1.1 during backward, which a gradient check must catch.
    pub fn corrupt_backward(&mut self, op_name: &'static str) {
        self.corrupt = Some(op_name);
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf that receives a gradient during backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf that is never differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
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

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Gradient accumulated into `v`; `None` if nothing reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of `v` as a tensor, zeros if nothing reached it.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        match &self.nodes[v.0].grad {
            Some(g) => Tensor::new(&shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn check_finite(&self, v: Var, context: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    fn binary_shapes(&self, a: Var, b: Var, op: &str) -> Result<Option<Vec<usize>>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(None);
        }
        broadcast_index(sa, sb).map(Some).ok_or_else(|| {
            Error::Shape(format!("{op}: cannot broadcast {sb:?} onto {sa:?}"))
        })
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let map = self.binary_shapes(a, b, name)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = match &map {
            None => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            Some(m) => va.iter().zip(m).map(|(&x, &j)| f(x, vb[j])).collect(),
        };
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    /// Elementwise `a + b`; `b` may broadcast onto `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        self.push(value, Op::Abs(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dimensions differ ({m}x{k} · {k2}x{n})"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose2()?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Softmax along the last axis of `a / temperature`, stabilized by
    /// subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let value = softmax_last_axis(self.value(a), temperature);
        Ok(self.push(value, Op::SoftmaxRows { x: a, temperature }, &[a]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`
    /// (both shaped like the last axis).
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("non-empty shape");
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::Shape(format!(
                "layernorm: affine params must be [{n}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xs.len() / n;
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let xh = (row[j] - mean) * is;
                xhat[r * n + j] = xh;
                out[r * n + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Unfolds a `[H, W, C]` feature map into `[H·W, 9·C]` rows holding each
    /// pixel's zero-padded 3×3 neighbourhood (tap-major, channel-minor).
    pub fn im2col3x3(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = match *self.shape(x) {
            [h, w, c] => (h, w, c),
            ref s => {
                return Err(Error::Shape(format!("im2col3x3 expects [H, W, C], got {s:?}")))
            }
        };
        let xs = self.value(x).data();
        let mut out = vec![0.0; h * w * 9 * c];
        for i in 0..h {
            for j in 0..w {
                let row = (i * w + j) * 9 * c;
                for ky in 0..3 {
                    let yi = i as isize + ky as isize - 1;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let xj = j as isize + kx as isize - 1;
                        if xj < 0 || xj >= w as isize {
                            continue;
                        }
                        let src = (yi as usize * w + xj as usize) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        out[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                    }
                }
            }
        }
        let value = Tensor::new(&[h * w, 9 * c], out)?;
        Ok(self.push(value, Op::Im2col3x3 { x, h, w, c }, &[x]))
    }

    /// 3×3 convolution with zero padding 1 on a `[H, W, C_in]` map.
    /// `kernel` is `[9·C_in, C_out]` in [`Graph::im2col3x3`] column order and
    /// `bias` is `[C_out]`.
    pub fn conv2d_3x3(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (h, w) = match *self.shape(x) {
            [h, w, _] => (h, w),
            ref s => return Err(Error::Shape(format!("conv2d expects [H, W, C], got {s:?}"))),
        };
        let cols = self.im2col3x3(x)?;
        let y = self.matmul(cols, kernel)?;
        let y = self.add(y, bias)?;
        let c_out = self.shape(y)[1];
        self.reshape(y, &[h, w, c_out])
    }

    /// Average pooling of a `[H, W, C]` map with a square window, no padding.
    pub fn avg_pool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (h, w, c) = match *self.shape(x) {
            [h, w, c] => (h, w, c),
            ref s => return Err(Error::Shape(format!("avg_pool2d expects [H, W, C], got {s:?}"))),
        };
        if window == 0 || stride == 0 {
            return Err(Error::InvalidArgument("pool window and stride must be positive".into()));
        }
        if window > h || window > w {
            return Err(Error::InvalidArgument(format!(
                "pool window {window} larger than input {h}x{w}"
            )));
        }
        let (ho, wo) = ((h - window) / stride + 1, (w - window) / stride + 1);
        let xs = self.value(x).data();
        let inv = 1.0 / (window * window) as f64;
        let mut out = vec![0.0; ho * wo * c];
        for oi in 0..ho {
            for oj in 0..wo {
                let dst = &mut out[(oi * wo + oj) * c..(oi * wo + oj + 1) * c];
                for u in 0..window {
                    for v in 0..window {
                        let src = ((oi * stride + u) * w + oj * stride + v) * c;
                        for (d, s) in dst.iter_mut().zip(&xs[src..src + c]) {
                            *d += s;
                        }
                    }
                }
                dst.iter_mut().for_each(|d| *d *= inv);
            }
        }
        let value = Tensor::new(&[ho, wo, c], out)?;
        Ok(self.push(value, Op::AvgPool2d { x, window, stride }, &[x]))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut axis_total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape(format!(
                    "concat along {axis}: {s:?} incompatible with {base:?}"
                )));
            }
            axis_total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = axis_total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.value(*p).data()[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// `len` entries of `x` starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "slice [{start}, {}) along axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, ext, inner) = axis_split(&shape, axis);
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            out.extend_from_slice(&xs[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(value, Op::Mean(x), &[x])
    }

    /// Reverse pass from a one-element `root`, seeding d(root)/d(root) = 1.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let mut contributions = self.local_grads(i, &g);
            if self.corrupt == Some(self.nodes[i].op.name()) {
                for (_, c) in &mut contributions {
                    c.iter_mut().for_each(|v| *v *= 1.1);
                }
            }
            self.nodes[i].grad = Some(g);
            for (parent, contrib) in contributions {
                let node = &mut self.nodes[parent.0];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    None => node.grad = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient contributions of node `i` to each of its parents that
    /// requires a gradient, given upstream gradient `g`.
    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.needs(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.needs(*b) {
                    out.push((*b, self.reduce_broadcast(*a, *b, g.iter().map(|v| sign * v))));
                }
            }
            Op::Mul(a, b) => {
                let map = broadcast_index(self.shape(*a), self.shape(*b))
                    .filter(|_| self.shape(*a) != self.shape(*b));
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let b_at = |k: usize| match &map {
                    Some(m) => vb[m[k]],
                    None => vb[k],
                };
                if self.needs(*a) {
                    out.push((*a, g.iter().enumerate().map(|(k, gv)| gv * b_at(k)).collect()));
                }
                if self.needs(*b) {
                    let prod = g.iter().zip(va).map(|(gv, av)| gv * av);
                    out.push((*b, self.reduce_broadcast(*a, *b, prod)));
                }
            }
            Op::Scale(a, f) => out.push((*a, g.iter().map(|v| v * f).collect())),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                out.push((
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                ));
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                out.push((*a, g.iter().zip(x).map(|(gv, &xv)| gv * gelu_grad(xv)).collect()));
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                out.push((
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(gv, &xv)| gv * if xv > 0.0 { 1.0 } else if xv < 0.0 { -1.0 } else { 0.0 })
                        .collect(),
                ));
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("matmul lhs");
                let n = self.value(*b).dims2().expect("matmul rhs").1;
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.value(*b).data(), true, &mut ga, false);
                    out.push((*a, ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, g, false, &mut gb, false);
                    out.push((*b, gb));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = node.value.dims2().expect("transpose");
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] = g[i * c + j];
                    }
                }
                out.push((*a, ga));
            }
            Op::Reshape(a) => out.push((*a, g.to_vec())),
            Op::SoftmaxRows { x, temperature } => {
                let y = node.value.data();
                let n = *node.value.shape().last().expect("shape");
                let mut gx = vec![0.0; y.len()];
                for r in 0..y.len() / n {
                    let (ys, gs) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] = ys[j] * (gs[j] - dot) / temperature;
                    }
                }
                out.push((*x, gx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = self.shape(*gamma)[0];
                let gm = self.value(*gamma).data();
                let rows = xhat.len() / n;
                if self.needs(*x) {
                    let mut gx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let xh = &xhat[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for j in 0..n {
                            let gh = gr[j] * gm[j];
                            sum_g += gh;
                            sum_gx += gh * xh[j];
                        }
                        let scale = inv_std[r] / n as f64;
                        for j in 0..n {
                            let gh = gr[j] * gm[j];
                            gx[r * n + j] = scale * (n as f64 * gh - sum_g - xh[j] * sum_gx);
                        }
                    }
                    out.push((*x, gx));
                }
                if self.needs(*gamma) {
                    let mut gg = vec![0.0; n];
                    for (k, (gv, xh)) in g.iter().zip(xhat).enumerate() {
                        gg[k % n] += gv * xh;
                    }
                    out.push((*gamma, gg));
                }
                if self.needs(*beta) {
                    let mut gb = vec![0.0; n];
                    for (k, gv) in g.iter().enumerate() {
                        gb[k % n] += gv;
                    }
                    out.push((*beta, gb));
                }
            }
            Op::Im2col3x3 { x, h, w, c } => {
                let (h, w, c) = (*h, *w, *c);
                let mut gx = vec![0.0; h * w * c];
                for i in 0..h {
                    for j in 0..w {
                        let row = (i * w + j) * 9 * c;
                        for ky in 0..3 {
                            let yi = i as isize + ky as isize - 1;
                            if yi < 0 || yi >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let xj = j as isize + kx as isize - 1;
                                if xj < 0 || xj >= w as isize {
                                    continue;
                                }
                                let dst = (yi as usize * w + xj as usize) * c;
                                let src = row + (ky * 3 + kx) * c;
                                for (d, s) in gx[dst..dst + c].iter_mut().zip(&g[src..src + c]) {
                                    *d += s;
                                }
                            }
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::AvgPool2d { x, window, stride } => {
                let (window, stride) = (*window, *stride);
                let [_, w, c] = *self.shape(*x) else { unreachable!() };
                let [ho, wo, _] = *node.value.shape() else { unreachable!() };
                let inv = 1.0 / (window * window) as f64;
                let mut gx = vec![0.0; self.value(*x).len()];
                for oi in 0..ho {
                    for oj in 0..wo {
                        let src = &g[(oi * wo + oj) * c..(oi * wo + oj + 1) * c];
                        for u in 0..window {
                            for v in 0..window {
                                let dst = ((oi * stride + u) * w + oj * stride + v) * c;
                                for (d, s) in gx[dst..dst + c].iter_mut().zip(src) {
                                    *d += s * inv;
                                }
                            }
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let ext = self.shape(*p)[*axis];
                    if self.needs(*p) {
                        let mut gp = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            gp.extend_from_slice(&g[base..base + ext * inner]);
                        }
                        out.push((*p, gp));
                    }
                    offset += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x);
                let (outer, ext, inner) = axis_split(shape, *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![0.0; numel(shape)];
                for o in 0..outer {
                    let base = o * ext * inner + start * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, gx));
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; self.value(*x).len()])),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                out.push((*x, vec![g[0] / n as f64; n]));
            }
        }
        out
    }

    /// Sums per-element gradients of the broadcast result back onto `b`.
    fn reduce_broadcast(&self, a: Var, b: Var, g: impl Iterator<Item = f64>) -> Vec<f64> {
        if self.shape(a) == self.shape(b) {
            return g.collect();
        }
        let map = broadcast_index(self.shape(a), self.shape(b)).expect("checked in forward");
        let mut gb = vec![0.0; self.value(b).len()];
        for (gv, &j) in g.zip(&map) {
            gb[j] += gv;
        }
        gb
    }
}

/// Row-wise softmax of `t / temperature` over the last axis.
pub fn softmax_last_axis(t: &Tensor, temperature: f64) -> Tensor {
    let n = *t.shape().last().expect("shape");
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / temperature).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Tensor::new(t.shape(), out).expect("same shape")
}
