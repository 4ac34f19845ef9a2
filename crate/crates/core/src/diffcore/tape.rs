//! Dynamic reverse-mode tape.
//!
//! Every forward pass records onto a fresh [`Tape`]; [`Tape::backward`] walks
//! the nodes in reverse creation order. Nodes that do not depend on any
//! gradient-requiring leaf are skipped on the reverse pass.

use std::collections::HashMap;

use super::array::{gemm, NdArray};
use super::DiffError;

/// Inputs to `ln` are clamped from below at this value.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
}

impl Var {
    pub fn tape_id(self) -> usize {
        self.id
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    Softmax(Var),
    L2Norm(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    IndexSelect(Var, Vec<usize>),
    BroadcastTo(Var),
    Conv2d(Conv2dCache),
}

#[derive(Clone, Debug)]
struct Conv2dCache {
    input: Var,
    weight: Var,
    /// im2col matrix, (C·k·k) × (H'·W').
    cols: Vec<f64>,
    in_shape: [usize; 3],
    kernel: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug)]
struct Node {
    value: NdArray,
    op: Op,
    requires_grad: bool,
}

/// Wengert list for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<NdArray>>,
    pub(crate) bound: HashMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: NdArray, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { id }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    /// Leaf whose gradient is tracked when `requires_grad` is set.
    pub fn leaf(&mut self, value: NdArray, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: NdArray) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &NdArray {
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.id].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&NdArray> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    // ---- elementwise binary ops with broadcasting ----

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, DiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        let value = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            NdArray::new(va.shape().to_vec(), data)?
        } else {
            let out = broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| DiffError::Shape {
                op: name,
                shapes: vec![va.shape().to_vec(), vb.shape().to_vec()],
            })?;
            let ia = broadcast_map(va.shape(), &out);
            let ib = broadcast_map(vb.shape(), &out);
            let (da, db) = (va.data(), vb.data());
            let data = ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect();
            NdArray::new(out, data)?
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    // ---- linear algebra ----

    /// `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DiffError::Shape {
                op: "matmul",
                shapes: vec![sa.to_vec(), sb.to_vec()],
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, &mut out, 0.0);
        let value = NdArray::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, DiffError> {
        let va = self.value(a);
        if va.ndim() != 2 {
            return Err(DiffError::Shape {
                op: "transpose",
                shapes: vec![va.shape().to_vec()],
            });
        }
        let value = transpose2(va);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    // ---- unary ----

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log of `max(x, LOG_CLAMP)`.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(LOG_CLAMP).ln(), Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same-shape multiply")
    }

    // ---- reductions ----

    /// Sum over `axis` (removing it), or over everything when `None`.
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var, DiffError> {
        let value = reduce(self.value(a), axis, "sum")?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Sum(a, axis), rg))
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var, DiffError> {
        let va = self.value(a);
        let count = match axis {
            None => va.len(),
            Some(ax) => *va.shape().get(ax).ok_or(DiffError::Axis {
                op: "mean",
                axis: ax,
                ndim: va.ndim(),
            })?,
        };
        let mut value = reduce(va, axis, "mean")?;
        let inv = 1.0 / count.max(1) as f64;
        value.data_mut().iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Mean(a, axis), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.cols().max(1);
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let value = NdArray::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a), rg)
    }

    /// Euclidean norm over the last axis (which is removed).
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.cols().max(1);
        let data: Vec<f64> = va
            .data()
            .chunks(n)
            .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let mut shape = va.shape().to_vec();
        shape.pop();
        let value = NdArray::new(shape, data).expect("reduced shape");
        let rg = self.rg(a);
        self.push(value, Op::L2Norm(a), rg)
    }

    // ---- structural ----

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, DiffError> {
        let first = *parts.first().ok_or(DiffError::Shape {
            op: "concat",
            shapes: vec![],
        })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(DiffError::Axis {
                op: "concat",
                axis,
                ndim: base.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(DiffError::Shape {
                    op: "concat",
                    shapes: parts.iter().map(|&q| self.shape(q).to_vec()).collect(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = NdArray::new(shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, DiffError> {
        let va = self.value(a);
        let shape = va.shape();
        if axis >= shape.len() {
            return Err(DiffError::Axis {
                op: "slice",
                axis,
                ndim: shape.len(),
            });
        }
        if start > end || end > shape[axis] {
            return Err(DiffError::Index {
                op: "slice",
                index: end,
                len: shape[axis],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let width = end - start;
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&va.data()[base..base + width * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = width;
        let value = NdArray::new(out_shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Slice(a, axis, start), rg))
    }

    /// Gathers entries of the leading axis (rows may repeat).
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var, DiffError> {
        let va = self.value(a);
        let rows = *va.shape().first().ok_or(DiffError::Axis {
            op: "index_select",
            axis: 0,
            ndim: 0,
        })?;
        let inner: usize = va.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= rows {
                return Err(DiffError::Index {
                    op: "index_select",
                    index: i,
                    len: rows,
                });
            }
            data.extend_from_slice(&va.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = va.shape().to_vec();
        shape[0] = indices.len();
        let value = NdArray::new(shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::IndexSelect(a, indices.to_vec()), rg))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let va = self.value(a);
        match broadcast_shape(va.shape(), shape) {
            Some(out) if out == shape => {}
            _ => {
                return Err(DiffError::Shape {
                    op: "broadcast_to",
                    shapes: vec![va.shape().to_vec(), shape.to_vec()],
                })
            }
        }
        let map = broadcast_map(va.shape(), shape);
        let data = map.iter().map(|&i| va.data()[i]).collect();
        let value = NdArray::new(shape.to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::BroadcastTo(a), rg))
    }

    /// 2-D convolution of a `[C,H,W]` input with `[O,C,k,k]` weights, zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var, DiffError> {
        let (vi, vw) = (self.value(input), self.value(weight));
        let (si, sw) = (vi.shape(), vw.shape());
        let bad = || DiffError::Shape {
            op: "conv2d",
            shapes: vec![si.to_vec(), sw.to_vec()],
        };
        if si.len() != 3 || sw.len() != 4 || sw[1] != si[0] || sw[2] != sw[3] || stride == 0 {
            return Err(bad());
        }
        let (c, h, w) = (si[0], si[1], si[2]);
        let (o, k) = (sw[0], sw[2]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(bad());
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let cols = im2col(vi.data(), [c, h, w], k, stride, pad, ho, wo);
        let mut out = vec![0.0; o * ho * wo];
        gemm(o, c * k * k, ho * wo, vw.data(), false, &cols, false, &mut out, 0.0);
        let value = NdArray::new(vec![o, ho, wo], out)?;
        let rg = self.rg(input) || self.rg(weight);
        let cache = Conv2dCache {
            input,
            weight,
            cols,
            in_shape: [c, h, w],
            kernel: k,
            stride,
            pad,
        };
        Ok(self.push(value, Op::Conv2d(cache), rg))
    }

    // ---- reverse pass ----

    /// Populates gradients of the scalar `root` for every reachable node.
    pub fn backward(&mut self, root: Var) -> Result<(), DiffError> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(DiffError::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<NdArray>> = vec![None; self.nodes.len()];
        grads[root.id] = Some(NdArray::ones(root_value.shape()));
        for id in (0..=root.id).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &NdArray, grads: &mut [Option<NdArray>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_reduced(grads, *a, g.clone());
                self.acc_reduced(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc_reduced(grads, *a, g.clone());
                self.acc_reduced(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let vb = self.expand(*b, g.shape());
                    self.acc_reduced(grads, *a, zip(g, &vb, |x, y| x * y));
                }
                if self.rg(*b) {
                    let va = self.expand(*a, g.shape());
                    self.acc_reduced(grads, *b, zip(g, &va, |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let vb = self.expand(*b, g.shape());
                if self.rg(*a) {
                    self.acc_reduced(grads, *a, zip(g, &vb, |x, y| x / y));
                }
                if self.rg(*b) {
                    // d(a/b)/db = -out / b
                    let t = zip(out, &vb, |o, y| -o / y);
                    self.acc_reduced(grads, *b, zip(g, &t, |x, y| x * y));
                }
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let va = self.expand(*a, g.shape());
                // Ties route to the first operand.
                let first = zip(&va, out, |x, o| if x == o { 1.0 } else { 0.0 });
                if self.rg(*a) {
                    self.acc_reduced(grads, *a, zip(g, &first, |x, m| x * m));
                }
                if self.rg(*b) {
                    self.acc_reduced(grads, *b, zip(g, &first, |x, m| x * (1.0 - m)));
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, vb.data(), true, &mut ga, 0.0);
                    self.acc(grads, *a, NdArray::new(vec![m, k], ga).unwrap());
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), true, g.data(), false, &mut gb, 0.0);
                    self.acc(grads, *b, NdArray::new(vec![k, n], gb).unwrap());
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, transpose2(g)),
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.acc(grads, *a, g.clone().reshape(shape).unwrap());
            }
            Op::Relu(a) => {
                let d = zip(g, out, |x, o| if o > 0.0 { x } else { 0.0 });
                self.acc(grads, *a, d);
            }
            Op::Tanh(a) => self.acc(grads, *a, zip(g, out, |x, o| x * (1.0 - o * o))),
            Op::Sigmoid(a) => self.acc(grads, *a, zip(g, out, |x, o| x * o * (1.0 - o))),
            Op::Exp(a) => self.acc(grads, *a, zip(g, out, |x, o| x * o)),
            Op::Log(a) => {
                let d = zip(g, self.value(*a), |x, v| if v >= LOG_CLAMP { x / v } else { 0.0 });
                self.acc(grads, *a, d);
            }
            Op::Abs(a) => {
                let d = zip(g, self.value(*a), |x, v| {
                    if v > 0.0 {
                        x
                    } else if v < 0.0 {
                        -x
                    } else {
                        0.0
                    }
                });
                self.acc(grads, *a, d);
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.map(|x| c * x)),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let in_shape = self.shape(*a).to_vec();
                let scale = if matches!(node.op, Op::Mean(..)) {
                    let count = match axis {
                        None => in_shape.iter().product::<usize>(),
                        Some(ax) => in_shape[*ax],
                    };
                    1.0 / count.max(1) as f64
                } else {
                    1.0
                };
                self.acc(grads, *a, expand_reduced(g, &in_shape, *axis, scale));
            }
            Op::Softmax(a) => {
                let n = out.cols().max(1);
                let mut d = vec![0.0; out.len()];
                for ((dr, yr), gr) in d.chunks_mut(n).zip(out.data().chunks(n)).zip(g.data().chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, gg)| y * gg).sum();
                    for ((dv, y), gg) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = y * (gg - dot);
                    }
                }
                self.acc(grads, *a, NdArray::new(out.shape().to_vec(), d).unwrap());
            }
            Op::L2Norm(a) => {
                let va = self.value(*a);
                let n = va.cols().max(1);
                let mut d = vec![0.0; va.len()];
                for (i, (dr, xr)) in d.chunks_mut(n).zip(va.data().chunks(n)).enumerate() {
                    let norm = out.data()[i];
                    if norm > 0.0 {
                        let s = g.data()[i] / norm;
                        for (dv, x) in dr.iter_mut().zip(xr) {
                            *dv = s * x;
                        }
                    }
                }
                self.acc(grads, *a, NdArray::new(va.shape().to_vec(), d).unwrap());
            }
            Op::Concat(parts, axis) => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let width = ps[*axis];
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(outer * width * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[base..base + width * inner]);
                        }
                        self.acc(grads, p, NdArray::new(ps, d).unwrap());
                    }
                    offset += width;
                }
            }
            Op::Slice(a, axis, start) => {
                let in_shape = self.shape(*a).to_vec();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let width = out.shape()[*axis];
                let mut d = NdArray::zeros(&in_shape);
                let dd = d.data_mut();
                for o in 0..outer {
                    let dst = (o * in_shape[*axis] + start) * inner;
                    let src = o * width * inner;
                    dd[dst..dst + width * inner].copy_from_slice(&g.data()[src..src + width * inner]);
                }
                self.acc(grads, *a, d);
            }
            Op::IndexSelect(a, indices) => {
                let in_shape = self.shape(*a).to_vec();
                let inner: usize = in_shape[1..].iter().product();
                let mut d = NdArray::zeros(&in_shape);
                let dd = d.data_mut();
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..inner {
                        dd[i * inner + j] += g.data()[k * inner + j];
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::BroadcastTo(a) => self.acc_reduced(grads, *a, g.clone()),
            Op::Conv2d(cache) => {
                let vw = self.value(cache.weight);
                let [c, h, w] = cache.in_shape;
                let (o, k) = (vw.shape()[0], cache.kernel);
                let (ho, wo) = (out.shape()[1], out.shape()[2]);
                let ckk = c * k * k;
                if self.rg(cache.weight) {
                    let mut gw = vec![0.0; o * ckk];
                    gemm(o, ho * wo, ckk, g.data(), false, &cache.cols, true, &mut gw, 0.0);
                    self.acc(grads, cache.weight, NdArray::new(vw.shape().to_vec(), gw).unwrap());
                }
                if self.rg(cache.input) {
                    let mut gcols = vec![0.0; ckk * ho * wo];
                    gemm(ckk, o, ho * wo, vw.data(), true, g.data(), false, &mut gcols, 0.0);
                    let gi = col2im(&gcols, [c, h, w], k, cache.stride, cache.pad, ho, wo);
                    self.acc(grads, cache.input, NdArray::new(vec![c, h, w], gi).unwrap());
                }
            }
        }
    }

    /// Value of `v` broadcast to `shape`.
    fn expand(&self, v: Var, shape: &[usize]) -> NdArray {
        let val = self.value(v);
        if val.shape() == shape {
            return val.clone();
        }
        let map = broadcast_map(val.shape(), shape);
        NdArray::new(shape.to_vec(), map.iter().map(|&i| val.data()[i]).collect()).unwrap()
    }

    fn acc_reduced(&self, grads: &mut [Option<NdArray>], v: Var, g: NdArray) {
        if !self.rg(v) {
            return;
        }
        let shape = self.shape(v);
        if g.shape() == shape {
            self.acc(grads, v, g);
        } else {
            self.acc(grads, v, sum_to_shape(&g, shape));
        }
    }

    fn acc(&self, grads: &mut [Option<NdArray>], v: Var, g: NdArray) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.id] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip(a: &NdArray, b: &NdArray, f: impl Fn(f64, f64) -> f64) -> NdArray {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    NdArray::new(a.shape().to_vec(), data).unwrap()
}

fn transpose2(a: &NdArray) -> NdArray {
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = a.data()[i * c + j];
        }
    }
    NdArray::new(vec![c, r], data).unwrap()
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out`, the flat index into an array of shape `src`
/// broadcast against it.
fn broadcast_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let n = out.len();
    let offset = n - src.len();
    let mut strides = vec![0usize; n];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        strides[i + offset] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for d in (0..n).rev() {
            idx[d] += 1;
            flat += strides[d];
            if idx[d] < out[d] {
                break;
            }
            flat -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn sum_to_shape(g: &NdArray, shape: &[usize]) -> NdArray {
    let map = broadcast_map(shape, g.shape());
    let mut out = NdArray::zeros(shape);
    let od = out.data_mut();
    for (&i, &v) in map.iter().zip(g.data()) {
        od[i] += v;
    }
    out
}

fn reduce(a: &NdArray, axis: Option<usize>, op: &'static str) -> Result<NdArray, DiffError> {
    match axis {
        None => Ok(NdArray::scalar(a.sum())),
        Some(ax) => {
            let shape = a.shape();
            if ax >= shape.len() {
                return Err(DiffError::Axis {
                    op,
                    axis: ax,
                    ndim: shape.len(),
                });
            }
            let outer: usize = shape[..ax].iter().product();
            let inner: usize = shape[ax + 1..].iter().product();
            let len = shape[ax];
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    for i in 0..inner {
                        data[o * inner + i] += a.data()[base + i];
                    }
                }
            }
            let mut out_shape = shape.to_vec();
            out_shape.remove(ax);
            NdArray::new(out_shape, data)
        }
    }
}

fn expand_reduced(g: &NdArray, in_shape: &[usize], axis: Option<usize>, scale: f64) -> NdArray {
    match axis {
        None => NdArray::filled(in_shape, g.item() * scale),
        Some(ax) => {
            let outer: usize = in_shape[..ax].iter().product();
            let inner: usize = in_shape[ax + 1..].iter().product();
            let len = in_shape[ax];
            let mut out = NdArray::zeros(in_shape);
            let od = out.data_mut();
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    for i in 0..inner {
                        od[base + i] = g.data()[o * inner + i] * scale;
                    }
                }
            }
            out
        }
    }
}

fn im2col(x: &[f64], [c, h, w]: [usize; 3], k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<f64> {
    let mut cols = vec![0.0; c * k * k * ho * wo];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = x[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], [c, h, w]: [usize; 3], k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<f64> {
    let mut x = vec![0.0; c * h * w];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[(ci * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}
