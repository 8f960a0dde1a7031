//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is an append-only list of nodes. Each node holds its forward
//! value and, when some operand participates in differentiation, the
//! operation that produced it. Vector-Jacobian products are expressed with
//! the same recorded operations, so a backward pass run with
//! `create_graph = true` is itself differentiable.

use std::collections::HashMap;

use crate::conv::{self, ConvGeom, Padding};
use crate::error::{Result, TensorError};
use crate::linalg;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Powf(Var, f64),
    Sum(Var),
    SumTo(Var),
    BroadcastTo(Var),
    MaxAll(Var),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Pad(Var, Vec<(usize, usize)>),
    Conv2d(Var, Var, ConvGeom),
    ConvInputGrad(Var, Var, ConvGeom),
    ConvWeightGrad(Var, Var, ConvGeom),
    Inverse(Var),
    LogAbsDet(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to the leaves that require them.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_node: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(&v)
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn finite(t: &Tensor, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), recording: true }
    }

    /// A tape that never records operations; every node is a constant.
    pub fn no_grad() -> Self {
        Tape { nodes: Vec::new(), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.recording;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var], name: &'static str) -> Result<Var> {
        finite(&value, name)?;
        let requires_grad = self.recording && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    // ----- elementwise -----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_with(self.value(b), "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_with(self.value(b), "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_with(self.value(b), "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&d| d == 0.0) {
            return Err(TensorError::Domain { op: "div", detail: "division by zero".into() });
        }
        let v = self.value(a).zip_with(self.value(b), "div", |x, y| x / y)?;
        self.push(v, Op::Div(a, b), &[a, b], "div")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a), &[a], "neg")
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a], "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a), &[a], "add_scalar")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), &[a], "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(TensorError::Domain { op: "log", detail: format!("argument {bad} is not positive") });
        }
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a), &[a], "log")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a), &[a], "tanh")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.push(v, Op::Sigmoid(a), &[a], "sigmoid")
    }

    /// `ln σ(a)`, finite wherever `a` is.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x >= 0.0 { -(-x).exp().ln_1p() } else { x - x.exp().ln_1p() });
        self.push(v, Op::LogSigmoid(a), &[a], "log_sigmoid")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a], "relu")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope), &[a], "leaky_relu")
    }

    /// `a^p` with a constant exponent.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x.powf(p));
        self.push(v, Op::Powf(a, p), &[a], "powf")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(TensorError::Domain { op: "sqrt", detail: "negative argument".into() });
        }
        self.powf(a, 0.5)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    // ----- reductions and broadcasting -----

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Reduce onto `shape` by summing along broadcast axes.
    pub fn sum_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        let v = self.value(a).sum_to(shape)?;
        self.push(v, Op::SumTo(a), &[a], "sum_to")
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        let v = self.value(a).broadcast_to(shape)?;
        self.push(v, Op::BroadcastTo(a), &[a], "broadcast_to")
    }

    /// Per-item sums over every axis but the first: `[N, ...] -> [N]`.
    pub fn sum_per_item(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.first().ok_or_else(|| TensorError::InvalidShape {
            shape: shape.clone(),
            reason: "per-item reduction needs a batch axis".into(),
        })?;
        let mut keep = vec![1; shape.len()];
        keep[0] = n;
        let s = self.sum_to(a, &keep)?;
        self.reshape(s, &[n])
    }

    /// Maximum over all elements; ties route the gradient to the first maximum.
    pub fn max_all(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a).data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.push(Tensor::scalar(m), Op::MaxAll(a), &[a], "max_all")
    }

    // ----- linear algebra and layout -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        let v = self.value(a).reshape(shape)?;
        self.push(v, Op::Reshape(a), &[a], "reshape")
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(a).permute(axes)?;
        self.push(v, Op::Permute(a, axes.to_vec()), &[a], "permute")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.permute(a, &[1, 0])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&tensors, axis)?;
        self.push(v, Op::Concat(parts.to_vec(), axis), parts, "concat")
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        if start == 0 && self.shape(a).get(axis) == Some(&len) {
            return Ok(a);
        }
        let v = self.value(a).slice_axis(axis, start, len)?;
        self.push(v, Op::Slice { x: a, axis, start }, &[a], "slice")
    }

    pub fn pad(&mut self, a: Var, pads: &[(usize, usize)]) -> Result<Var> {
        let v = self.value(a).pad(pads)?;
        self.push(v, Op::Pad(a, pads.to_vec()), &[a], "pad")
    }

    // ----- convolution -----

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 || ws.len() != 4 {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: xs.to_vec(), rhs: ws.to_vec() });
        }
        let geom = ConvGeom::new(xs[2], xs[3], ws[2], ws[3], stride, padding)?;
        self.conv2d_geom(x, w, geom)
    }

    fn conv2d_geom(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let v = conv::conv2d(self.value(x), self.value(w), &geom)?;
        self.push(v, Op::Conv2d(x, w, geom), &[x, w], "conv2d")
    }

    fn conv2d_input_grad(&mut self, g: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let v = conv::conv2d_input_grad(self.value(g), self.value(w), &geom)?;
        self.push(v, Op::ConvInputGrad(g, w, geom), &[g, w], "conv2d_input_grad")
    }

    fn conv2d_weight_grad(&mut self, x: Var, g: Var, geom: ConvGeom) -> Result<Var> {
        let v = conv::conv2d_weight_grad(self.value(x), self.value(g), &geom)?;
        self.push(v, Op::ConvWeightGrad(x, g, geom), &[x, g], "conv2d_weight_grad")
    }

    // ----- matrix functions -----

    pub fn inverse(&mut self, a: Var) -> Result<Var> {
        let v = linalg::inverse(self.value(a))?;
        self.push(v, Op::Inverse(a), &[a], "inverse")
    }

    /// `ln |det a|` as a rank-0 tensor.
    pub fn log_abs_det(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(linalg::log_abs_det(self.value(a))?);
        self.push(v, Op::LogAbsDet(a), &[a], "log_abs_det")
    }

    // ----- backward -----

    fn vjp(&mut self, node: usize, g: Var) -> Result<Vec<(Var, Var)>> {
        let op = self.nodes[node].op.clone();
        let out = Var(node);
        let rg = |t: &Tape, v: Var| t.nodes[v.0].requires_grad;
        let mut res = Vec::with_capacity(2);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if rg(self, a) {
                    let s = self.shape(a).to_vec();
                    res.push((a, self.sum_to(g, &s)?));
                }
                if rg(self, b) {
                    let s = self.shape(b).to_vec();
                    res.push((b, self.sum_to(g, &s)?));
                }
            }
            Op::Sub(a, b) => {
                if rg(self, a) {
                    let s = self.shape(a).to_vec();
                    res.push((a, self.sum_to(g, &s)?));
                }
                if rg(self, b) {
                    let s = self.shape(b).to_vec();
                    let n = self.neg(g)?;
                    res.push((b, self.sum_to(n, &s)?));
                }
            }
            Op::Mul(a, b) => {
                if rg(self, a) {
                    let s = self.shape(a).to_vec();
                    let p = self.mul(g, b)?;
                    res.push((a, self.sum_to(p, &s)?));
                }
                if rg(self, b) {
                    let s = self.shape(b).to_vec();
                    let p = self.mul(g, a)?;
                    res.push((b, self.sum_to(p, &s)?));
                }
            }
            Op::Div(a, b) => {
                if rg(self, a) {
                    let s = self.shape(a).to_vec();
                    let q = self.div(g, b)?;
                    res.push((a, self.sum_to(q, &s)?));
                }
                if rg(self, b) {
                    let s = self.shape(b).to_vec();
                    let ratio = self.div(out, b)?;
                    let p = self.mul(g, ratio)?;
                    let n = self.neg(p)?;
                    res.push((b, self.sum_to(n, &s)?));
                }
            }
            Op::Neg(a) => res.push((a, self.neg(g)?)),
            Op::Scale(a, c) => res.push((a, self.scale(g, c)?)),
            Op::AddScalar(a) => res.push((a, g)),
            Op::Exp(a) => res.push((a, self.mul(g, out)?)),
            Op::Log(a) => res.push((a, self.div(g, a)?)),
            Op::Tanh(a) => {
                let sq = self.mul(out, out)?;
                let ns = self.neg(sq)?;
                let d = self.add_scalar(ns, 1.0)?;
                res.push((a, self.mul(g, d)?));
            }
            Op::Sigmoid(a) => {
                let no = self.neg(out)?;
                let one_minus = self.add_scalar(no, 1.0)?;
                let d = self.mul(out, one_minus)?;
                res.push((a, self.mul(g, d)?));
            }
            Op::LogSigmoid(a) => {
                let na = self.neg(a)?;
                let d = self.sigmoid(na)?;
                res.push((a, self.mul(g, d)?));
            }
            Op::Relu(a) => {
                let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let m = self.constant(mask);
                res.push((a, self.mul(g, m)?));
            }
            Op::LeakyRelu(a, slope) => {
                let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { slope });
                let m = self.constant(mask);
                res.push((a, self.mul(g, m)?));
            }
            Op::Powf(a, p) => {
                let pm = self.powf(a, p - 1.0)?;
                let d = self.scale(pm, p)?;
                res.push((a, self.mul(g, d)?));
            }
            Op::Sum(a) | Op::SumTo(a) => {
                let s = self.shape(a).to_vec();
                res.push((a, self.broadcast_to(g, &s)?));
            }
            Op::BroadcastTo(a) => {
                let s = self.shape(a).to_vec();
                res.push((a, self.sum_to(g, &s)?));
            }
            Op::MaxAll(a) => {
                let src = self.value(a).clone();
                let target = self.value(out).data()[0];
                let hit = src.data().iter().position(|&v| v == target).unwrap_or(0);
                let mut mask = vec![0.0; src.numel()];
                mask[hit] = 1.0;
                let mask = Tensor::new(src.shape().to_vec(), mask)?;
                let m = self.constant(mask);
                let s = src.shape().to_vec();
                let gb = self.broadcast_to(g, &s)?;
                res.push((a, self.mul(gb, m)?));
            }
            Op::MatMul(a, b) => {
                if rg(self, a) {
                    let bt = self.transpose(b)?;
                    res.push((a, self.matmul(g, bt)?));
                }
                if rg(self, b) {
                    let at = self.transpose(a)?;
                    res.push((b, self.matmul(at, g)?));
                }
            }
            Op::Reshape(a) => {
                let s = self.shape(a).to_vec();
                res.push((a, self.reshape(g, &s)?));
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (k, &ax) in axes.iter().enumerate() {
                    inv[ax] = k;
                }
                res.push((a, self.permute(g, &inv)?));
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for p in parts {
                    let len = self.shape(p)[axis];
                    if rg(self, p) {
                        res.push((p, self.slice(g, axis, start, len)?));
                    }
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let full = self.shape(x).to_vec();
                let len = self.shape(out)[axis];
                let mut pads = vec![(0, 0); full.len()];
                pads[axis] = (start, full[axis] - start - len);
                res.push((x, self.pad(g, &pads)?));
            }
            Op::Pad(a, pads) => {
                let inner = self.shape(a).to_vec();
                let mut cur = g;
                for (axis, &(before, _)) in pads.iter().enumerate() {
                    cur = self.slice(cur, axis, before, inner[axis])?;
                }
                res.push((a, cur));
            }
            Op::Conv2d(x, w, geom) => {
                if rg(self, x) {
                    res.push((x, self.conv2d_input_grad(g, w, geom)?));
                }
                if rg(self, w) {
                    res.push((w, self.conv2d_weight_grad(x, g, geom)?));
                }
            }
            Op::ConvInputGrad(g0, w, geom) => {
                if rg(self, g0) {
                    res.push((g0, self.conv2d_geom(g, w, geom)?));
                }
                if rg(self, w) {
                    res.push((w, self.conv2d_weight_grad(g, g0, geom)?));
                }
            }
            Op::ConvWeightGrad(x, g0, geom) => {
                if rg(self, x) {
                    res.push((x, self.conv2d_input_grad(g0, g, geom)?));
                }
                if rg(self, g0) {
                    res.push((g0, self.conv2d_geom(x, g, geom)?));
                }
            }
            Op::Inverse(a) => {
                let ot = self.transpose(out)?;
                let left = self.matmul(ot, g)?;
                let both = self.matmul(left, ot)?;
                res.push((a, self.neg(both)?));
            }
            Op::LogAbsDet(a) => {
                let inv = self.inverse(a)?;
                let it = self.transpose(inv)?;
                res.push((a, self.mul(it, g)?));
            }
        }
        Ok(res)
    }

    fn backprop(&mut self, root: Var, create_graph: bool) -> Result<Vec<Option<Var>>> {
        let shape = self.shape(root).to_vec();
        if self.value(root).numel() != 1 {
            return Err(TensorError::NonScalarRoot(shape));
        }
        let saved = self.recording;
        self.recording = saved && create_graph;
        let result = (|| {
            let mut grads: Vec<Option<Var>> = vec![None; root.0 + 1];
            let seed = self.constant(Tensor::ones(&shape).unwrap_or_else(|_| Tensor::scalar(1.0)));
            grads[root.0] = Some(seed);
            for i in (0..=root.0).rev() {
                let Some(g) = grads[i] else { continue };
                if !self.nodes[i].requires_grad {
                    continue;
                }
                for (parent, contribution) in self.vjp(i, g)? {
                    grads[parent.0] = Some(match grads[parent.0] {
                        None => contribution,
                        Some(existing) => self.add(existing, contribution)?,
                    });
                }
            }
            Ok(grads)
        })();
        self.recording = saved;
        result
    }

    /// Gradients of a scalar `root` with respect to every reachable leaf that requires one.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        let grads = self.backprop(root, false)?;
        let mut by_node = HashMap::new();
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let node = &self.nodes[i];
                if node.requires_grad && matches!(node.op, Op::Leaf) {
                    by_node.insert(Var(i), self.nodes[g.0].value.clone());
                }
            }
        }
        Ok(Gradients { by_node })
    }

    /// Gradients of `root` with respect to `wrt`, as nodes on this tape.
    ///
    /// With `create_graph` the returned nodes are themselves differentiable.
    /// Unreached inputs get a zero constant.
    pub fn grad(&mut self, root: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        let grads = self.backprop(root, create_graph)?;
        wrt.iter()
            .map(|&w| match grads.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let z = Tensor::zeros(self.shape(w))?;
                    Ok(self.constant(z))
                }
            })
            .collect()
    }
}
