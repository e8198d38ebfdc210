//! Reverse-mode tape.
//!
//! Every forward op appends a node holding its output value; nodes are only
//! ever appended, so the node vector is already in topological order and the
//! backward pass is a single reverse sweep. Ops whose inputs are all
//! constants are stored as constants and skipped during backward.

use std::cell::{Ref, RefCell};

use super::conv::{self, ConvGeom};
use super::tensor::{broadcast_index, broadcast_shapes, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    LayerNorm {
        x: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    Sigmoid(Var),
    Gelu(Var),
    Binary(Binary, Var, Var),
    Pow(Var, T),
    Exp(Var),
    Log(Var),
    AddScalar(Var),
    MulScalar(Var, T),
    ClampMin(Var, T),
    GlobalMaxPool(Var, Vec<usize>),
    GlobalAvgPool(Var),
    SumLast(Var),
    Sum(Var),
    Concat(Vec<Var>, usize),
    Reshape(Var),
    Transpose(Var),
    BroadcastTo(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Records forward operations and replays them in reverse.
///
/// A tape is single-threaded; independent tapes may run on different threads.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor<T>) -> Result<Var> {
        self.input(value, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&self, value: Tensor<T>) -> Result<Var> {
        self.input(value, false)
    }

    fn input(&self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Ok(Var(nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn value_ref(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    fn push(&self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|v| nodes[v.0].requires_grad);
        nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
            grad: None,
        });
        Ok(Var(nodes.len() - 1))
    }

    // ----- linear algebra --------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
                return Err(Error::shape("matmul", ta.shape(), tb.shape()));
            }
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            let mut out = vec![T::ZERO; m * n];
            T::gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
            Tensor::new(&[m, n], out)?
        };
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// 2-D convolution of a single `C×H×W` image with weights
    /// `[C_out, C_in/groups, kh, kw]` and explicit zero padding.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let (out, geom, cols, needs_cols) = {
            let nodes = self.nodes.borrow();
            let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
            if tx.rank() != 3 || tw.rank() != 4 || groups == 0 || stride == 0 {
                return Err(Error::shape("conv2d", tx.shape(), tw.shape()));
            }
            let geom = ConvGeom {
                cin: tx.shape()[0],
                h: tx.shape()[1],
                w: tx.shape()[2],
                cout: tw.shape()[0],
                kh: tw.shape()[2],
                kw: tw.shape()[3],
                stride,
                pad,
                groups,
            };
            if geom.cin % groups != 0
                || geom.cout % groups != 0
                || tw.shape()[1] != geom.cin / groups
                || geom.h + 2 * pad < geom.kh
                || geom.w + 2 * pad < geom.kw
            {
                return Err(Error::shape("conv2d", tx.shape(), tw.shape()));
            }
            let bias = match b {
                Some(b) => {
                    let tb = &nodes[b.0].value;
                    if tb.shape() != [geom.cout] {
                        return Err(Error::shape("conv2d bias", tb.shape(), &[geom.cout]));
                    }
                    Some(tb.data())
                }
                None => None,
            };
            let (out, cols) = conv::conv_forward(tx.data(), tw.data(), bias, &geom);
            let out = Tensor::new(&[geom.cout, geom.out_h(), geom.out_w()], out)?;
            (out, geom, cols, nodes[w.0].requires_grad)
        };
        let cols = if needs_cols { cols } else { Vec::new() };
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("conv2d", out, Op::Conv2d { x, w, b, geom, cols }, &inputs)
    }

    /// Normalizes over the last axis (zero mean, unit variance), no affine.
    pub fn layer_norm(&self, x: Var, eps: f64) -> Result<Var> {
        let (out, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let n = *tx.shape().last().ok_or_else(|| Error::Invalid("layer_norm on a scalar".into()))?;
            let eps = T::from_f64(eps);
            let nf = T::from_f64(n as f64);
            let mut xhat = Vec::with_capacity(tx.numel());
            let mut inv_std = Vec::with_capacity(tx.numel() / n.max(1));
            for row in tx.data().chunks(n) {
                let mean = row.iter().copied().sum::<T>() / nf;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
                let is = T::ONE / (var + eps).sqrt();
                inv_std.push(is);
                xhat.extend(row.iter().map(|&v| (v - mean) * is));
            }
            (Tensor::new(tx.shape(), xhat.clone())?, xhat, inv_std)
        };
        self.push("layer_norm", out, Op::LayerNorm { x, xhat, inv_std }, &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let n = *tx.shape().last().ok_or_else(|| Error::Invalid("softmax on a scalar".into()))?;
            let mut out = Vec::with_capacity(tx.numel());
            for row in tx.data().chunks(n) {
                let m = row.iter().copied().fold(row[0], |a, b| if b > a { b } else { a });
                let start = out.len();
                out.extend(row.iter().map(|&v| (v - m).exp()));
                let s: T = out[start..].iter().copied().sum();
                out[start..].iter_mut().for_each(|v| *v = *v / s);
            }
            Tensor::new(tx.shape(), out)?
        };
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    fn unary(&self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let out = self.nodes.borrow()[x.0].value.map(f);
        self.push(name, out, op, &[x])
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    /// GELU, tanh approximation, evaluated as `x·σ(2u)` which equals
    /// `0.5·x·(1 + tanh u)`.
    pub fn gelu(&self, x: Var) -> Result<Var> {
        self.unary(
            "gelu",
            x,
            |v| v * sigmoid(T::from_f64(2.0 * GELU_C) * (v + T::from_f64(GELU_A) * v * v * v)),
            Op::Gelu(x),
        )
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary("exp", x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        self.unary("log", x, |v| v.ln(), Op::Log(x))
    }

    /// Elementwise power with a constant exponent.
    pub fn pow(&self, x: Var, exponent: f64) -> Result<Var> {
        let e = T::from_f64(exponent);
        self.unary("pow", x, |v| v.powf(e), Op::Pow(x, e))
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    pub fn mul_scalar(&self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        self.unary("mul_scalar", x, |v| v * c, Op::MulScalar(x, c))
    }

    pub fn neg(&self, x: Var) -> Result<Var> {
        self.mul_scalar(x, -1.0)
    }

    /// `max(x, min)`; the gradient is zero where the clamp is active.
    pub fn clamp_min(&self, x: Var, min: f64) -> Result<Var> {
        let m = T::from_f64(min);
        self.unary("clamp_min", x, |v| if v > m { v } else { m }, Op::ClampMin(x, m))
    }

    // ----- broadcasting binary ops ------------------------------------------

    fn binary(&self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let f = |x: T, y: T| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
            };
            if ta.shape() == tb.shape() {
                let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(ta.shape(), data)?
            } else {
                let shape = broadcast_shapes(ta.shape(), tb.shape())
                    .ok_or_else(|| Error::shape(name, ta.shape(), tb.shape()))?;
                let ia = broadcast_index(ta.shape(), &shape);
                let ib = broadcast_index(tb.shape(), &shape);
                let data = ia
                    .iter()
                    .zip(&ib)
                    .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
                    .collect();
                Tensor::new(&shape, data)?
            }
        };
        self.push(name, out, Op::Binary(kind, a, b), &[a, b])
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    // ----- reductions -------------------------------------------------------

    fn channel_split(&self, x: Var, op: &'static str) -> Result<(usize, usize)> {
        let shape = self.shape(x);
        if shape.len() < 2 || shape.iter().product::<usize>() == 0 {
            return Err(Error::Invalid(format!("{op} expects a C×... tensor, got {shape:?}")));
        }
        let c = shape[0];
        Ok((c, shape.iter().product::<usize>() / c))
    }

    /// Max over every axis but the first; ties go to the first position.
    pub fn global_max_pool(&self, x: Var) -> Result<Var> {
        let (c, n) = self.channel_split(x, "global_max_pool")?;
        let (out, argmax) = {
            let nodes = self.nodes.borrow();
            let d = nodes[x.0].value.data();
            let mut out = Vec::with_capacity(c);
            let mut argmax = Vec::with_capacity(c);
            for ch in 0..c {
                let row = &d[ch * n..(ch + 1) * n];
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                out.push(row[best]);
                argmax.push(ch * n + best);
            }
            (Tensor::new(&[c], out)?, argmax)
        };
        self.push("global_max_pool", out, Op::GlobalMaxPool(x, argmax), &[x])
    }

    /// Mean over every axis but the first.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let (c, n) = self.channel_split(x, "global_avg_pool")?;
        let out = {
            let nodes = self.nodes.borrow();
            let d = nodes[x.0].value.data();
            let nf = T::from_f64(n as f64);
            let out = d.chunks(n).map(|r| r.iter().copied().sum::<T>() / nf).collect();
            Tensor::new(&[c], out)?
        };
        self.push("global_avg_pool", out, Op::GlobalAvgPool(x), &[x])
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&self, x: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let shape = tx.shape();
            let n = *shape.last().ok_or_else(|| Error::Invalid("sum_last on a scalar".into()))?;
            let data = tx.data().chunks(n.max(1)).map(|r| r.iter().copied().sum()).collect();
            Tensor::new(&shape[..shape.len() - 1], data)?
        };
        self.push("sum_last", out, Op::SumLast(x), &[x])
    }

    /// Sum of all elements as a rank-0 scalar.
    pub fn sum(&self, x: Var) -> Result<Var> {
        let s = self.nodes.borrow()[x.0].value.data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let n = self.nodes.borrow()[x.0].value.numel();
        let s = self.sum(x)?;
        self.mul_scalar(s, 1.0 / n as f64)
    }

    // ----- layout -----------------------------------------------------------

    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = nodes[inputs.first().ok_or_else(|| Error::Invalid("concat of nothing".into()))?.0]
                .value
                .shape()
                .to_vec();
            if axis >= first.len() {
                return Err(Error::Invalid(format!("concat axis {axis} out of range for {first:?}")));
            }
            let mut shape = first.clone();
            shape[axis] = 0;
            for v in inputs {
                let s = nodes[v.0].value.shape();
                let compatible = s.len() == first.len()
                    && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(Error::shape("concat", &first, s));
                }
                shape[axis] += s[axis];
            }
            let outer: usize = first[..axis].iter().product();
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for v in inputs {
                    let t = &nodes[v.0].value;
                    let inner = t.numel() / outer;
                    data.extend_from_slice(&t.data()[o * inner..(o + 1) * inner]);
                }
            }
            Tensor::new(&shape, data)?
        };
        self.push("concat", out, Op::Concat(inputs.to_vec(), axis), inputs)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// 2-D transpose.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let out = self.nodes.borrow()[x.0].value.transpose2()?;
        self.push("transpose", out, Op::Transpose(x), &[x])
    }

    pub fn broadcast_to(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            if broadcast_shapes(tx.shape(), shape).as_deref() != Some(shape) {
                return Err(Error::shape("broadcast_to", tx.shape(), shape));
            }
            let idx = broadcast_index(tx.shape(), shape);
            Tensor::new(shape, idx.iter().map(|&i| tx.data()[i]).collect())?
        };
        self.push("broadcast_to", out, Op::BroadcastTo(x), &[x])
    }

    // ----- backward ---------------------------------------------------------

    /// Accumulates `d root / d leaf` into every gradient-requiring leaf.
    pub fn backward(&self, root: Var) -> Result<()> {
        let leaf_grads = {
            let nodes = self.nodes.borrow();
            let root_node = &nodes[root.0];
            if root_node.value.numel() != 1 {
                return Err(Error::NonScalarRoot(root_node.value.shape().to_vec()));
            }
            let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
            grads[root.0] = Some(Tensor::ones(root_node.value.shape()));
            let mut leaf_grads = Vec::new();
            for i in (0..=root.0).rev() {
                let Some(g) = grads[i].take() else { continue };
                let node = &nodes[i];
                if !node.requires_grad {
                    continue;
                }
                if let Op::Leaf = node.op {
                    leaf_grads.push((i, g));
                    continue;
                }
                self.propagate(&nodes, node, g, &mut grads)?;
            }
            leaf_grads
        };
        let mut nodes = self.nodes.borrow_mut();
        for (i, g) in leaf_grads {
            match &mut nodes[i].grad {
                Some(acc) => acc.add_assign(&g)?,
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, nodes: &[Node<T>], node: &Node<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(*a) {
                    let mut ga = vec![T::ZERO; m * k];
                    T::gemm(m, n, k, g.data(), false, tb.data(), true, &mut ga, false);
                    accumulate(grads, *a, Tensor::new(ta.shape(), ga)?)?;
                }
                if wants(*b) {
                    let mut gb = vec![T::ZERO; k * n];
                    T::gemm(k, m, n, ta.data(), true, g.data(), false, &mut gb, false);
                    accumulate(grads, *b, Tensor::new(tb.shape(), gb)?)?;
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                if wants(*x) {
                    let mut dx = vec![T::ZERO; val(*x).numel()];
                    conv::conv_backward_input(g.data(), val(*w).data(), geom, &mut dx);
                    accumulate(grads, *x, Tensor::new(val(*x).shape(), dx)?)?;
                }
                if wants(*w) {
                    let mut dw = vec![T::ZERO; val(*w).numel()];
                    conv::conv_backward_weight(g.data(), cols, geom, &mut dw);
                    accumulate(grads, *w, Tensor::new(val(*w).shape(), dw)?)?;
                }
                if let Some(b) = b.filter(|b| wants(*b)) {
                    let p = geom.out_h() * geom.out_w();
                    let db = g.data().chunks(p).map(|r| r.iter().copied().sum()).collect();
                    accumulate(grads, b, Tensor::new(&[geom.cout], db)?)?;
                }
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let n = *y.shape().last().unwrap_or(&1);
                let nf = T::from_f64(n as f64);
                let mut dx = Vec::with_capacity(y.numel());
                for ((gr, xr), &is) in g.data().chunks(n).zip(xhat.chunks(n)).zip(inv_std) {
                    let sg: T = gr.iter().copied().sum();
                    let sgx: T = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                    dx.extend(gr.iter().zip(xr).map(|(&gi, &xi)| is / nf * (nf * gi - sg - xi * sgx)));
                }
                accumulate(grads, *x, Tensor::new(y.shape(), dx)?)?;
            }
            Op::Softmax(x) => {
                let n = *y.shape().last().unwrap_or(&1);
                let mut dx = Vec::with_capacity(y.numel());
                for (gr, yr) in g.data().chunks(n).zip(y.data().chunks(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    dx.extend(gr.iter().zip(yr).map(|(&gi, &yi)| yi * (gi - dot)));
                }
                accumulate(grads, *x, Tensor::new(y.shape(), dx)?)?;
            }
            Op::Sigmoid(x) => {
                let dx = zip_map(&g, y, |gi, yi| gi * yi * (T::ONE - yi));
                accumulate(grads, *x, dx)?;
            }
            Op::Gelu(x) => {
                let dx = zip_map(&g, val(*x), |gi, v| {
                    let c2 = T::from_f64(2.0 * GELU_C);
                    let a = T::from_f64(GELU_A);
                    let s = sigmoid(c2 * (v + a * v * v * v));
                    let d = s + v * s * (T::ONE - s) * c2 * (T::ONE + T::from_f64(3.0) * a * v * v);
                    gi * d
                });
                accumulate(grads, *x, dx)?;
            }
            Op::Exp(x) => accumulate(grads, *x, zip_map(&g, y, |gi, yi| gi * yi))?,
            Op::Log(x) => accumulate(grads, *x, zip_map(&g, val(*x), |gi, v| gi / v))?,
            Op::Pow(x, e) => {
                let e = *e;
                accumulate(grads, *x, zip_map(&g, val(*x), |gi, v| gi * e * v.powf(e - T::ONE)))?
            }
            Op::AddScalar(x) => accumulate(grads, *x, g)?,
            Op::MulScalar(x, c) => {
                let c = *c;
                accumulate(grads, *x, g.map(|v| v * c))?
            }
            Op::ClampMin(x, m) => {
                let m = *m;
                accumulate(grads, *x, zip_map(&g, val(*x), |gi, v| if v > m { gi } else { T::ZERO }))?
            }
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let same = ta.shape() == tb.shape();
                let (ia, ib) = if same {
                    (Vec::new(), Vec::new())
                } else {
                    (broadcast_index(ta.shape(), y.shape()), broadcast_index(tb.shape(), y.shape()))
                };
                let at = |i: usize| if same { i } else { ia[i] };
                let bt = |i: usize| if same { i } else { ib[i] };
                if wants(*a) {
                    let mut ga = vec![T::ZERO; ta.numel()];
                    for (i, &gi) in g.data().iter().enumerate() {
                        let bv = tb.data()[bt(i)];
                        ga[at(i)] += match kind {
                            Binary::Add | Binary::Sub => gi,
                            Binary::Mul => gi * bv,
                            Binary::Div => gi / bv,
                        };
                    }
                    accumulate(grads, *a, Tensor::new(ta.shape(), ga)?)?;
                }
                if wants(*b) {
                    let mut gb = vec![T::ZERO; tb.numel()];
                    for (i, &gi) in g.data().iter().enumerate() {
                        let (av, bv) = (ta.data()[at(i)], tb.data()[bt(i)]);
                        gb[bt(i)] += match kind {
                            Binary::Add => gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * av,
                            Binary::Div => -gi * av / (bv * bv),
                        };
                    }
                    accumulate(grads, *b, Tensor::new(tb.shape(), gb)?)?;
                }
            }
            Op::GlobalMaxPool(x, argmax) => {
                let mut dx = vec![T::ZERO; val(*x).numel()];
                for (&i, &gi) in argmax.iter().zip(g.data()) {
                    dx[i] += gi;
                }
                accumulate(grads, *x, Tensor::new(val(*x).shape(), dx)?)?;
            }
            Op::GlobalAvgPool(x) => {
                let tx = val(*x);
                let n = tx.numel() / y.numel();
                let nf = T::from_f64(n as f64);
                let dx = g.data().iter().flat_map(|&gi| std::iter::repeat_n(gi / nf, n)).collect();
                accumulate(grads, *x, Tensor::new(tx.shape(), dx)?)?;
            }
            Op::SumLast(x) => {
                let tx = val(*x);
                let n = *tx.shape().last().unwrap_or(&1);
                let dx = g.data().iter().flat_map(|&gi| std::iter::repeat_n(gi, n)).collect();
                accumulate(grads, *x, Tensor::new(tx.shape(), dx)?)?;
            }
            Op::Sum(x) => {
                let tx = val(*x);
                accumulate(grads, *x, Tensor::full(tx.shape(), g.item()))?;
            }
            Op::Concat(inputs, axis) => {
                let outer: usize = y.shape()[..*axis].iter().product();
                let mut offset = 0;
                let row = y.numel() / outer;
                for v in inputs {
                    let t = val(*v);
                    let inner = t.numel() / outer;
                    if wants(*v) {
                        let mut d = Vec::with_capacity(t.numel());
                        for o in 0..outer {
                            d.extend_from_slice(&g.data()[o * row + offset..o * row + offset + inner]);
                        }
                        accumulate(grads, *v, Tensor::new(t.shape(), d)?)?;
                    }
                    offset += inner;
                }
            }
            Op::Reshape(x) => accumulate(grads, *x, g.reshape(val(*x).shape())?)?,
            Op::Transpose(x) => accumulate(grads, *x, g.transpose2()?)?,
            Op::BroadcastTo(x) => {
                let tx = val(*x);
                let idx = broadcast_index(tx.shape(), y.shape());
                let mut dx = vec![T::ZERO; tx.numel()];
                for (&i, &gi) in idx.iter().zip(g.data()) {
                    dx[i] += gi;
                }
                accumulate(grads, *x, Tensor::new(tx.shape(), dx)?)?;
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

fn zip_map<T: Real>(g: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(other.shape(), data).expect("same shape")
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
