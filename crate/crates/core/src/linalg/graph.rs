//! Reverse-mode gradient tape over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and enough
//! structure to run the backward rule. [`Graph::backward`] walks the tape
//! in reverse from a scalar output and returns the gradient of every node
//! that depends on a differentiable leaf.

use super::tensor::{matmul_into, numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Relu,
    Sigmoid,
    /// `ln(1 + e^x)`, evaluated stably.
    Softplus,
    Exp,
    Log,
    Square,
    /// Elementwise SmoothL1 of the argument (taken as a difference `a - b`).
    SmoothL1,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary(BinaryKind, Var, Var),
    Unary(UnaryKind, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    SoftmaxLast(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    Resize(Var),
    Concat(Vec<Var>, usize),
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    IndexSelect(Var, Vec<usize>),
    SumAxis(Var, usize),
    SumAll(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not receive any.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    pub(crate) bound_params: Vec<(usize, Var)>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- elementwise ------------------------------------------------------

    /// Elementwise binary op with numpy-style broadcasting between tensors of
    /// equal rank (each axis equal, or 1 on one side).
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape("binary", &sa, &sb))?;
        let f = binary_fn(kind);
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let data = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_index(&sa, &out_shape);
            let ib = broadcast_index(&sb, &out_shape);
            ia.iter().zip(&ib).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        let value = Tensor::new(&out_shape, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Max, a, b)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Min, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let f = unary_fn(kind);
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, Op::Unary(kind, a), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Softplus, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Log, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Square, a)
    }

    pub fn smooth_l1_elem(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::SmoothL1, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        let rg = self.rg(a);
        self.push(value, Op::Offset(a), rg)
    }

    // ---- linear algebra ---------------------------------------------------

    /// `[M×K]·[K×N]`, or batched `[B×M×K]·[B×K×N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, m, k, n) = matmul_dims(&sa, &sb)?;
        let mut out = vec![0.0; batch * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            matmul_into(
                &va[bi * m * k..(bi + 1) * m * k],
                &vb[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if perm.len() != sa.len() || perm.iter().any(|&p| p >= sa.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &sa, perm));
        }
        let value = permute_tensor(self.value(a), perm);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Permute(a, perm.to_vec()), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::shape("transpose", self.shape(a), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let value = Tensor::new(t.shape(), out).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxLast(a), rg)
    }

    /// Layer normalization over the last axis with affine `gain`/`bias` of that width.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", t.shape(), self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = t.len() / d;
        let mut xhat = vec![0.0; t.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(t.shape(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Same-padded 2D cross-correlation. `x` is `[C_in×H×W]` or `[B×C_in×H×W]`,
    /// `w` is `[C_out×C_in×k×k]` with odd `k`, `b` is `[C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let geo = ConvGeom::new(&sx, &sw)?;
        if self.shape(b) != [geo.cout] {
            return Err(Error::shape("conv2d bias", &sw, self.shape(b)));
        }
        let out = conv_forward(&geo, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut shape = sx.clone();
        let r = shape.len();
        shape[r - 3] = geo.cout;
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Conv2d { x, w, b }, rg))
    }

    /// Bilinear resize of `[C×H×W]` with align-corners sampling:
    /// output index `o` reads source coordinate `o·(in−1)/(out−1)`.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || out_h == 0 || out_w == 0 {
            return Err(Error::shape("resize_bilinear", &sx, &[out_h, out_w]));
        }
        let value = resize_forward(self.value(x), out_h, out_w);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Resize(x), rg))
    }

    // ---- structural -------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .nodes
            .get(parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?.0)
            .expect("valid var")
            .value
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat axis", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let s = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * s * inner..(o + 1) * s * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), rg))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || len == 0 || start + len > sa[axis] {
            return Err(Error::shape("slice", &sa, &[axis, start, len]));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * sa[axis] + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Slice { a, axis, start }, rg))
    }

    /// Gathers entries along axis 0.
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if indices.is_empty() || indices.iter().any(|&i| i >= sa[0]) {
            return Err(Error::shape("index_select", &sa, indices));
        }
        let inner: usize = sa[1..].iter().product();
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            out.extend_from_slice(&d[i * inner..(i + 1) * inner]);
        }
        let mut shape = sa;
        shape[0] = indices.len();
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::IndexSelect(a, indices.to_vec()), rg))
    }

    /// Sums out `axis`. Reducing the only axis of a vector yields shape `[1]`.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::shape("sum_axis", &sa, &[axis]));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let n = sa[axis];
        let d = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += v;
                }
            }
        }
        let mut shape = sa;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SumAxis(a, axis), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse pass from a single-element output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::shape("backward (scalar output required)", self.shape(out), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::new(self.shape(out), vec![1.0])?);
        for idx in (0..=out.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.backprop_node(node, &gy, &mut grads)?;
            }
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let out_shape = node.value.shape();
                let ia = broadcast_index(va.shape(), out_shape);
                let ib = broadcast_index(vb.shape(), out_shape);
                let mut ga = vec![0.0; va.len()];
                let mut gb = vec![0.0; vb.len()];
                let (da, db) = (va.data(), vb.data());
                for (o, &g) in gy.data().iter().enumerate() {
                    let (x, y) = (da[ia[o]], db[ib[o]]);
                    let (pa, pb) = match kind {
                        BinaryKind::Add => (1.0, 1.0),
                        BinaryKind::Sub => (1.0, -1.0),
                        BinaryKind::Mul => (y, x),
                        BinaryKind::Div => (1.0 / y, -x / (y * y)),
                        // ties send the gradient to the first operand
                        BinaryKind::Max => if x >= y { (1.0, 0.0) } else { (0.0, 1.0) },
                        BinaryKind::Min => if x <= y { (1.0, 0.0) } else { (0.0, 1.0) },
                    };
                    ga[ia[o]] += g * pa;
                    gb[ib[o]] += g * pb;
                }
                self.accumulate(grads, *a, Tensor::new(va.shape(), ga)?);
                self.accumulate(grads, *b, Tensor::new(vb.shape(), gb)?);
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a);
                let y = &node.value;
                let data = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(gy.data())
                    .map(|((&xv, &yv), &g)| g * unary_deriv(*kind, xv, yv))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.shape(), data)?);
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, gy.map(|g| g * c));
            }
            Op::Offset(a) => {
                self.accumulate(grads, *a, gy.clone());
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (batch, m, k, n) = matmul_dims(va.shape(), vb.shape())?;
                let mut ga = vec![0.0; va.len()];
                let mut gb = vec![0.0; vb.len()];
                for bi in 0..batch {
                    let g = &gy.data()[bi * m * n..(bi + 1) * m * n];
                    let ad = &va.data()[bi * m * k..(bi + 1) * m * k];
                    let bd = &vb.data()[bi * k * n..(bi + 1) * k * n];
                    // dA = dY·Bᵀ
                    let ga_b = &mut ga[bi * m * k..(bi + 1) * m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bd[p * n + j];
                            }
                            ga_b[i * k + p] += s;
                        }
                    }
                    // dB = Aᵀ·dY
                    let gb_b = &mut gb[bi * k * n..(bi + 1) * k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb_b[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(va.shape(), ga)?);
                self.accumulate(grads, *b, Tensor::new(vb.shape(), gb)?);
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.accumulate(grads, *a, permute_tensor(gy, &inv));
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, gy.reshape(self.shape(*a))?);
            }
            Op::SoftmaxLast(a) => {
                let y = &node.value;
                let n = y.last_dim();
                let mut gx = vec![0.0; y.len()];
                for ((gr, yr), out) in gy.data().chunks(n).zip(y.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for j in 0..n {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape(), gx)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let g = self.value(*gain).data();
                let d = g.len();
                let rows = xhat.len() / d;
                let mut gx = vec![0.0; xhat.len()];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let dy = &gy.data()[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        gg[j] += dy[j] * xh[j];
                        gb[j] += dy[j];
                        dxhat[j] = dy[j] * g[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xh[j];
                    }
                    let inv = inv_std[r];
                    for j in 0..d {
                        gx[r * d + j] = inv / d as f64 * (d as f64 * dxhat[j] - s1 - xh[j] * s2);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), gx)?);
                self.accumulate(grads, *gain, Tensor::new(&[d], gg)?);
                self.accumulate(grads, *bias, Tensor::new(&[d], gb)?);
            }
            Op::Conv2d { x, w, b } => {
                let geo = ConvGeom::new(self.shape(*x), self.shape(*w))?;
                let (gx, gw, gbias) = conv_backward(&geo, self.value(*x).data(), self.value(*w).data(), gy.data());
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), gx)?);
                self.accumulate(grads, *w, Tensor::new(self.shape(*w), gw)?);
                self.accumulate(grads, *b, Tensor::new(&[geo.cout], gbias)?);
            }
            Op::Resize(x) => {
                let g = resize_backward(self.shape(*x), gy);
                self.accumulate(grads, *x, g);
            }
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let s = self.shape(p)[*axis];
                    let mut g = Vec::with_capacity(outer * s * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        g.extend_from_slice(&gy.data()[base..base + s * inner]);
                    }
                    offset += s;
                    self.accumulate(grads, p, Tensor::new(self.shape(p), g)?);
                }
            }
            Op::Slice { a, axis, start } => {
                let sa = self.shape(*a);
                let len = node.value.shape()[*axis];
                let outer: usize = sa[..*axis].iter().product();
                let inner: usize = sa[axis + 1..].iter().product();
                let mut g = vec![0.0; numel(sa)];
                for o in 0..outer {
                    let base = (o * sa[*axis] + start) * inner;
                    g[base..base + len * inner].copy_from_slice(&gy.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *a, Tensor::new(sa, g)?);
            }
            Op::IndexSelect(a, indices) => {
                let sa = self.shape(*a);
                let inner: usize = sa[1..].iter().product();
                let mut g = vec![0.0; numel(sa)];
                for (k, &i) in indices.iter().enumerate() {
                    for (dst, &v) in g[i * inner..(i + 1) * inner].iter_mut().zip(&gy.data()[k * inner..(k + 1) * inner]) {
                        *dst += v;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(sa, g)?);
            }
            Op::SumAxis(a, axis) => {
                let sa = self.shape(*a);
                let outer: usize = sa[..*axis].iter().product();
                let inner: usize = sa[axis + 1..].iter().product();
                let n = sa[*axis];
                let mut g = vec![0.0; numel(sa)];
                for o in 0..outer {
                    for k in 0..n {
                        g[(o * n + k) * inner..(o * n + k + 1) * inner]
                            .copy_from_slice(&gy.data()[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(sa, g)?);
            }
            Op::SumAll(a) => {
                let g = gy.item();
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), g));
            }
        }
        Ok(())
    }
}

fn binary_fn(kind: BinaryKind) -> fn(f64, f64) -> f64 {
    match kind {
        BinaryKind::Add => |a, b| a + b,
        BinaryKind::Sub => |a, b| a - b,
        BinaryKind::Mul => |a, b| a * b,
        BinaryKind::Div => |a, b| a / b,
        BinaryKind::Max => |a, b| if a >= b { a } else { b },
        BinaryKind::Min => |a, b| if a <= b { a } else { b },
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn smooth_l1(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * d * d
    } else {
        a - 0.5
    }
}

fn unary_fn(kind: UnaryKind) -> fn(f64) -> f64 {
    match kind {
        UnaryKind::Neg => |x| -x,
        UnaryKind::Relu => |x| if x > 0.0 { x } else { 0.0 },
        UnaryKind::Sigmoid => sigmoid,
        UnaryKind::Softplus => softplus,
        UnaryKind::Exp => f64::exp,
        UnaryKind::Log => f64::ln,
        UnaryKind::Square => |x| x * x,
        UnaryKind::SmoothL1 => smooth_l1,
    }
}

fn unary_deriv(kind: UnaryKind, x: f64, y: f64) -> f64 {
    match kind {
        UnaryKind::Neg => -1.0,
        UnaryKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryKind::Sigmoid => y * (1.0 - y),
        UnaryKind::Softplus => sigmoid(x),
        UnaryKind::Exp => y,
        UnaryKind::Log => 1.0 / x,
        UnaryKind::Square => 2.0 * x,
        UnaryKind::SmoothL1 => {
            if x.abs() < 1.0 {
                x
            } else {
                x.signum()
            }
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// For every flat index of `out`, the flat index into a tensor of shape `src`
/// that broadcasts onto it.
fn broadcast_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    let n = numel(out);
    if src == out {
        return (0..n).collect();
    }
    let rank = out.len();
    let mut src_strides = vec![0; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        src_strides[d] = if src[d] == 1 { 0 } else { acc };
        acc *= src[d];
    }
    let mut idx = vec![0usize; rank];
    let mut res = Vec::with_capacity(n);
    let mut cur = 0usize;
    for _ in 0..n {
        res.push(cur);
        for d in (0..rank).rev() {
            idx[d] += 1;
            cur += src_strides[d];
            if idx[d] < out[d] {
                break;
            }
            cur -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    res
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match (sa, sb) {
        ([m, k], [k2, n]) if k == k2 => Ok((1, *m, *k, *n)),
        ([b, m, k], [b2, k2, n]) if k == k2 && b == b2 => Ok((*b, *m, *k, *n)),
        _ => Err(Error::shape("matmul", sa, sb)),
    }
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let s = t.shape();
    let rank = s.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * s[d + 1];
    }
    // stride in the source for each output axis
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    let d = t.data();
    for _ in 0..n {
        out.push(d[cur]);
        for a in (0..rank).rev() {
            idx[a] += 1;
            cur += strides[a];
            if idx[a] < out_shape[a] {
                break;
            }
            cur -= strides[a] * idx[a];
            idx[a] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permute preserves size")
}

struct ConvGeom {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl ConvGeom {
    fn new(sx: &[usize], sw: &[usize]) -> Result<Self> {
        let (batch, cin, h, w) = match sx {
            [c, h, w] => (1, *c, *h, *w),
            [b, c, h, w] => (*b, *c, *h, *w),
            _ => return Err(Error::shape("conv2d input", sx, sw)),
        };
        match sw {
            [cout, ci, k, k2] if *ci == cin && k == k2 && k % 2 == 1 => Ok(Self {
                batch,
                cin,
                cout: *cout,
                h,
                w,
                k: *k,
            }),
            _ => Err(Error::shape("conv2d", sx, sw)),
        }
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
}

/// Output columns `xx` whose source column `xx + off` lies inside `0..w`.
fn valid_cols(w: isize, off: isize) -> std::ops::Range<usize> {
    let lo = (-off).clamp(0, w);
    let hi = (w - off).clamp(lo, w);
    lo as usize..hi as usize
}

/// Unfolds one `[C×H×W]` image into `[C·k·k × H·W]` columns (zero padded).
fn im2col(geo: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let (h, w, k) = (geo.h as isize, geo.w as isize, geo.k);
    let pad = (k / 2) as isize;
    let hw = geo.h * geo.w;
    let wu = geo.w;
    for c in 0..geo.cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let off = kx as isize - pad;
                let span = valid_cols(w, off);
                for y in 0..h {
                    let sy = y + ky as isize - pad;
                    let out = &mut dst[y as usize * wu..(y as usize + 1) * wu];
                    if sy < 0 || sy >= h {
                        out.fill(0.0);
                        continue;
                    }
                    out[..span.start].fill(0.0);
                    out[span.end..].fill(0.0);
                    let base = c * hw + sy as usize * wu;
                    let s0 = (span.start as isize + off) as usize;
                    out[span.clone()].copy_from_slice(&x[base + s0..base + s0 + span.len()]);
                }
            }
        }
    }
}

fn col2im(geo: &ConvGeom, cols: &[f64], gx: &mut [f64]) {
    let (h, w, k) = (geo.h as isize, geo.w as isize, geo.k);
    let pad = (k / 2) as isize;
    let hw = geo.h * geo.w;
    let wu = geo.w;
    for c in 0..geo.cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let off = kx as isize - pad;
                let span = valid_cols(w, off);
                for y in 0..h {
                    let sy = y + ky as isize - pad;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    let base = c * hw + sy as usize * wu;
                    let s0 = (span.start as isize + off) as usize;
                    let dst = &mut gx[base + s0..base + s0 + span.len()];
                    let from = &src[y as usize * wu + span.start..y as usize * wu + span.end];
                    for (d, v) in dst.iter_mut().zip(from) {
                        *d += v;
                    }
                }
            }
        }
    }
}

fn conv_forward(geo: &ConvGeom, x: &[f64], wt: &[f64], bias: &[f64]) -> Vec<f64> {
    let hw = geo.h * geo.w;
    let p = geo.patch();
    let mut cols = vec![0.0; p * hw];
    let mut out = vec![0.0; geo.batch * geo.cout * hw];
    for b in 0..geo.batch {
        im2col(geo, &x[b * geo.cin * hw..(b + 1) * geo.cin * hw], &mut cols);
        let o = &mut out[b * geo.cout * hw..(b + 1) * geo.cout * hw];
        for (co, row) in o.chunks_mut(hw).enumerate() {
            row.fill(bias[co]);
        }
        matmul_into(wt, &cols, o, geo.cout, p, hw);
    }
    out
}

fn conv_backward(geo: &ConvGeom, x: &[f64], wt: &[f64], gy: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hw = geo.h * geo.w;
    let p = geo.patch();
    let mut cols = vec![0.0; p * hw];
    let mut gcols = vec![0.0; p * hw];
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; geo.cout];
    for b in 0..geo.batch {
        let g = &gy[b * geo.cout * hw..(b + 1) * geo.cout * hw];
        im2col(geo, &x[b * geo.cin * hw..(b + 1) * geo.cin * hw], &mut cols);
        for co in 0..geo.cout {
            let grow = &g[co * hw..(co + 1) * hw];
            gb[co] += grow.iter().sum::<f64>();
            for r in 0..p {
                let crow = &cols[r * hw..(r + 1) * hw];
                gw[co * p + r] += grow.iter().zip(crow).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        // dcols = Wᵀ·dY
        gcols.fill(0.0);
        for co in 0..geo.cout {
            let grow = &g[co * hw..(co + 1) * hw];
            for r in 0..p {
                let wv = wt[co * p + r];
                if wv == 0.0 {
                    continue;
                }
                for (dst, &gv) in gcols[r * hw..(r + 1) * hw].iter_mut().zip(grow) {
                    *dst += wv * gv;
                }
            }
        }
        col2im(geo, &gcols, &mut gx[b * geo.cin * hw..(b + 1) * geo.cin * hw]);
    }
    (gx, gw, gb)
}

/// Source index pair and fractional weight for each output coordinate.
pub(crate) fn align_corners_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|o| {
            let src = if output > 1 {
                o as f64 * (input - 1) as f64 / (output - 1) as f64
            } else {
                0.0
            };
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn resize_forward(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ty = align_corners_taps(h, oh);
    let tx = align_corners_taps(w, ow);
    let d = x.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let base = ch * h * w;
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v00 = d[base + y0 * w + x0];
                let v01 = d[base + y0 * w + x1];
                let v10 = d[base + y1 * w + x0];
                let v11 = d[base + y1 * w + x1];
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out[ch * oh * ow + oy * ow + ox] = top + (bot - top) * fy;
            }
        }
    }
    Tensor::new(&[c, oh, ow], out).expect("resize shape")
}

fn resize_backward(in_shape: &[usize], gy: &Tensor) -> Tensor {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (gy.shape()[1], gy.shape()[2]);
    let ty = align_corners_taps(h, oh);
    let tx = align_corners_taps(w, ow);
    let mut g = vec![0.0; c * h * w];
    for ch in 0..c {
        let base = ch * h * w;
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let go = gy.data()[ch * oh * ow + oy * ow + ox];
                g[base + y0 * w + x0] += go * (1.0 - fy) * (1.0 - fx);
                g[base + y0 * w + x1] += go * (1.0 - fy) * fx;
                g[base + y1 * w + x0] += go * fy * (1.0 - fx);
                g[base + y1 * w + x1] += go * fy * fx;
            }
        }
    }
    Tensor::new(in_shape, g).expect("resize grad shape")
}
