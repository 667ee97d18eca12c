//! Define-by-run tape. Every op appends a node holding its value; `backward`
//! walks the nodes in reverse and returns gradients for the leaves.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};

use crate::tensor::{broadcast_index, broadcast_shape, matmul_raw, Tensor};
use crate::AutodiffError;

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

/// What to do when an op produces NaN or infinity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NanPolicy {
    #[default]
    Error,
    Warn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Elu,
    LeakyRelu(f64),
    Softplus,
    ClampMin(f64),
    Sqrt,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Binary(Bin, usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Unary(Unary, usize),
    Reshape(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Sum(usize),
    SumAxis { x: usize, axis: usize },
    Mean(usize),
    SegmentSoftmax { x: usize, seg: Vec<usize> },
    LayerNorm { x: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    GatherRows { x: usize, idx: Vec<usize> },
    ScatterAddRows { x: usize, idx: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
    nan_policy: NanPolicy,
    warned: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(outer, axis_len, inner)` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product())
}

/// Row count and row width for row-wise ops on a tensor of rank ≥ 1.
fn rows(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[1..].iter().product())
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
            nan_policy: NanPolicy::Error,
            warned: false,
        }
    }

    pub fn with_policy(nan_policy: NanPolicy) -> Self {
        Tape { nan_policy, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize, AutodiffError> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(AutodiffError::DisconnectedTape);
        }
        Ok(v.index())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var, AutodiffError> {
        if !value.is_finite() {
            match self.nan_policy {
                NanPolicy::Error => return Err(AutodiffError::NonFiniteValue { op: op_name }),
                NanPolicy::Warn => {
                    if !self.warned {
                        log::warn!("non-finite value produced by {op_name}");
                        self.warned = true;
                    }
                }
            }
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var { tape: self.id, idx: (self.nodes.len() - 1) as u32 })
    }

    fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad });
        Var { tape: self.id, idx: (self.nodes.len() - 1) as u32 }
    }

    /// Named trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: &str, t: Tensor) -> Var {
        let v = self.leaf(t, true);
        self.params.push((name.to_string(), v.index()));
        v
    }

    /// Unnamed leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let ((m, k), (k2, n)) = match (av.dims2(), bv.dims2()) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(shape_err("matmul", format!("{:?} x {:?}", av.shape(), bv.shape()))),
        };
        if k != k2 {
            return Err(shape_err("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let out = Tensor::new(vec![m, n], matmul_raw(av.data(), bv.data(), m, k, n, false, false))?;
        self.push("matmul", out, Op::MatMul(ia, ib), &[ia, ib])
    }

    fn binary(&mut self, kind: Bin, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let name = match kind {
            Bin::Add => "add",
            Bin::Sub => "sub",
            Bin::Mul => "mul",
            Bin::Div => "div",
        };
        let f = |x: f64, y: f64| match kind {
            Bin::Add => x + y,
            Bin::Sub => x - y,
            Bin::Mul => x * y,
            Bin::Div => x / y,
        };
        let out = if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(av.shape().to_vec(), data)?
        } else {
            let shape = broadcast_shape(av.shape(), bv.shape())
                .ok_or_else(|| shape_err(name, format!("{:?} vs {:?}", av.shape(), bv.shape())))?;
            let xa = broadcast_index(&shape, av.shape());
            let xb = broadcast_index(&shape, bv.shape());
            let data = xa.iter().zip(&xb).map(|(&i, &j)| f(av.data()[i], bv.data()[j])).collect();
            Tensor::new(shape, data)?
        };
        self.push(name, out, Op::Binary(kind, ia, ib), &[ia, ib])
    }

    /// Broadcasting elementwise sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Bin::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Bin::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Bin::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Bin::Div, a, b)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, AutodiffError> {
        let i = self.idx(x)?;
        let out = self.nodes[i].value.map(|v| v + c);
        self.push("add_scalar", out, Op::AddScalar(i), &[i])
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var, AutodiffError> {
        let i = self.idx(x)?;
        let out = self.nodes[i].value.map(|v| v * c);
        self.push("mul_scalar", out, Op::MulScalar(i, c), &[i])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.mul_scalar(x, -1.0)
    }

    pub fn square(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.mul(x, x)
    }

    fn unary(&mut self, u: Unary, name: &'static str, x: Var) -> Result<Var, AutodiffError> {
        let i = self.idx(x)?;
        let out = self.nodes[i].value.map(|v| match u {
            Unary::Exp => v.exp(),
            Unary::Log => v.ln(),
            Unary::Tanh => v.tanh(),
            Unary::Sigmoid => sigmoid(v),
            Unary::Elu => {
                if v > 0.0 {
                    v
                } else {
                    v.exp_m1()
                }
            }
            Unary::LeakyRelu(s) => {
                if v > 0.0 {
                    v
                } else {
                    s * v
                }
            }
            Unary::Softplus => softplus(v),
            Unary::ClampMin(m) => v.max(m),
            Unary::Sqrt => v.sqrt(),
        });
        self.push(name, out, Op::Unary(u, i), &[i])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(Unary::Exp, "exp", x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(Unary::Log, "log", x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(Unary::Tanh, "tanh", x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(Unary::Sigmoid, "sigmoid", x)
    }

    /// ELU with α = 1.
    pub fn elu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(Unary::Elu, "elu", x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var, AutodiffError> {
        self.unary(Unary::LeakyRelu(slope), "leaky_relu", x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(Unary::Softplus, "softplus", x)
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var, AutodiffError> {
        self.unary(Unary::ClampMin(floor), "clamp_min", x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(Unary::Sqrt, "sqrt", x)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let i = self.idx(x)?;
        let out = self.nodes[i].value.clone().reshaped(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(i), &[i])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let ids = xs.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>, _>>()?;
        let first = self.nodes[*ids.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?].value.shape().to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} on {first:?}")));
        }
        let mut total = 0;
        for &i in &ids {
            let s = self.nodes[i].value.shape();
            if s.len() != first.len() || s.iter().enumerate().any(|(d, &n)| d != axis && n != first[d]) {
                return Err(shape_err("concat", format!("{s:?} vs {first:?} along {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &ids {
                let v = &self.nodes[i].value;
                let w = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        self.push("concat", out, Op::Concat { inputs: ids.clone(), axis }, &ids)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let i = self.idx(x)?;
        let v = &self.nodes[i].value;
        if axis >= v.ndim() || start + len > v.shape()[axis] {
            return Err(shape_err("slice", format!("{start}..{} of axis {axis} in {:?}", start + len, v.shape())));
        }
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        self.push("slice", out, Op::Slice { x: i, axis, start }, &[i])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let i = self.idx(x)?;
        let out = Tensor::scalar(self.nodes[i].value.data().iter().sum());
        self.push("sum", out, Op::Sum(i), &[i])
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        let i = self.idx(x)?;
        let v = &self.nodes[i].value;
        if axis >= v.ndim() {
            return Err(shape_err("sum_axis", format!("axis {axis} on {:?}", v.shape())));
        }
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                for j in 0..inner {
                    data[o * inner + j] += v.data()[(o * n + a) * inner + j];
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(shape, data)?;
        self.push("sum_axis", out, Op::SumAxis { x: i, axis }, &[i])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let i = self.idx(x)?;
        let v = &self.nodes[i].value;
        if v.numel() == 0 {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let out = Tensor::scalar(v.data().iter().sum::<f64>() / v.numel() as f64);
        self.push("mean", out, Op::Mean(i), &[i])
    }

    /// Softmax over the rows sharing a segment id, independently per column.
    /// `x` is `[E]` or `[E, H]` and `seg` has length `E`.
    pub fn segment_softmax(&mut self, x: Var, seg: &[usize]) -> Result<Var, AutodiffError> {
        let i = self.idx(x)?;
        let v = &self.nodes[i].value;
        if v.ndim() == 0 || v.ndim() > 2 || v.shape()[0] != seg.len() {
            return Err(shape_err("segment_softmax", format!("{:?} with {} segment ids", v.shape(), seg.len())));
        }
        let (e, h) = rows(v.shape());
        let nseg = seg.iter().max().map_or(0, |m| m + 1);
        let mut max = vec![f64::NEG_INFINITY; nseg * h];
        for r in 0..e {
            for c in 0..h {
                let m = &mut max[seg[r] * h + c];
                *m = m.max(v.data()[r * h + c]);
            }
        }
        let mut data: Vec<f64> = (0..e * h).map(|k| (v.data()[k] - max[seg[k / h] * h + k % h]).exp()).collect();
        let mut denom = vec![0.0; nseg * h];
        for (k, d) in data.iter().enumerate() {
            denom[seg[k / h] * h + k % h] += d;
        }
        for (k, d) in data.iter_mut().enumerate() {
            *d /= denom[seg[k / h] * h + k % h];
        }
        let out = Tensor::new(v.shape().to_vec(), data)?;
        self.push("segment_softmax", out, Op::SegmentSoftmax { x: i, seg: seg.to_vec() }, &[i])
    }

    /// Normalizes the last dimension to zero mean and unit variance, no affine.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var, AutodiffError> {
        let i = self.idx(x)?;
        let v = &self.nodes[i].value;
        let d = *v.shape().last().ok_or_else(|| shape_err("layer_norm", "scalar input".into()))?;
        if d == 0 {
            return Err(shape_err("layer_norm", "empty last dimension".into()));
        }
        let r = v.numel() / d;
        let mut xhat = Vec::with_capacity(v.numel());
        let mut inv_std = Vec::with_capacity(r);
        for row in v.data().chunks(d) {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std.push(s);
            xhat.extend(row.iter().map(|a| (a - mu) * s));
        }
        let out = Tensor::new(v.shape().to_vec(), xhat.clone())?;
        self.push("layer_norm", out, Op::LayerNorm { x: i, xhat, inv_std }, &[i])
    }

    /// Rows of `x` picked by `idx` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, AutodiffError> {
        let i = self.idx(x)?;
        let v = &self.nodes[i].value;
        if v.ndim() == 0 {
            return Err(shape_err("gather_rows", "scalar input".into()));
        }
        let (n, w) = rows(v.shape());
        if let Some(bad) = idx.iter().find(|&&j| j >= n) {
            return Err(shape_err("gather_rows", format!("row {bad} of {n}")));
        }
        let mut data = Vec::with_capacity(idx.len() * w);
        for &j in idx {
            data.extend_from_slice(&v.data()[j * w..(j + 1) * w]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = idx.len();
        let out = Tensor::new(shape, data)?;
        self.push("gather_rows", out, Op::GatherRows { x: i, idx: idx.to_vec() }, &[i])
    }

    /// Sums row `e` of `x` into row `idx[e]` of an `n`-row output.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], n: usize) -> Result<Var, AutodiffError> {
        let i = self.idx(x)?;
        let v = &self.nodes[i].value;
        if v.ndim() == 0 || v.shape()[0] != idx.len() {
            return Err(shape_err("scatter_add_rows", format!("{:?} with {} indices", v.shape(), idx.len())));
        }
        if let Some(bad) = idx.iter().find(|&&j| j >= n) {
            return Err(shape_err("scatter_add_rows", format!("row {bad} of {n}")));
        }
        let (_, w) = rows(v.shape());
        let mut data = vec![0.0; n * w];
        for (e, &j) in idx.iter().enumerate() {
            for c in 0..w {
                data[j * w + c] += v.data()[e * w + c];
            }
        }
        let mut shape = v.shape().to_vec();
        shape[0] = n;
        let out = Tensor::new(shape, data)?;
        self.push("scatter_add_rows", out, Op::ScatterAddRows { x: i, idx: idx.to_vec() }, &[i])
    }

    /// Reverse pass from a one-element `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients, AutodiffError> {
        let li = self.idx(loss)?;
        let lv = &self.nodes[li].value;
        if lv.numel() != 1 {
            return Err(AutodiffError::NotScalar(lv.shape().to_vec()));
        }
        let seed = Tensor::full(lv.shape(), 1.0);
        let nodes = self.nodes;
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[li] = Some(seed);

        let acc = |grads: &mut Vec<Option<Tensor>>, j: usize, t: Tensor| {
            if !nodes[j].requires_grad {
                return;
            }
            match &mut grads[j] {
                Some(g) => g.add_assign(&t),
                slot => *slot = Some(t),
            }
        };

        for i in (0..=li).rev() {
            if !nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let y = &nodes[i].value;
            match &nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k) = av.dims2().unwrap();
                    let n = bv.shape()[1];
                    if nodes[*a].requires_grad {
                        let ga = matmul_raw(g.data(), bv.data(), m, n, k, false, true);
                        acc(&mut grads, *a, Tensor::new(vec![m, k], ga)?);
                    }
                    if nodes[*b].requires_grad {
                        let gb = matmul_raw(av.data(), g.data(), k, m, n, true, false);
                        acc(&mut grads, *b, Tensor::new(vec![k, n], gb)?);
                    }
                }
                Op::Binary(kind, a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let same_a = av.shape() == y.shape();
                    let same_b = bv.shape() == y.shape();
                    let xa = if same_a { Vec::new() } else { broadcast_index(y.shape(), av.shape()) };
                    let xb = if same_b { Vec::new() } else { broadcast_index(y.shape(), bv.shape()) };
                    let ia = |k: usize| if same_a { k } else { xa[k] };
                    let ib = |k: usize| if same_b { k } else { xb[k] };
                    if nodes[*a].requires_grad {
                        let mut ga = Tensor::zeros(av.shape());
                        for (k, gk) in g.data().iter().enumerate() {
                            let d = match kind {
                                Bin::Add | Bin::Sub => *gk,
                                Bin::Mul => gk * bv.data()[ib(k)],
                                Bin::Div => gk / bv.data()[ib(k)],
                            };
                            ga.data_mut()[ia(k)] += d;
                        }
                        acc(&mut grads, *a, ga);
                    }
                    if nodes[*b].requires_grad {
                        let mut gb = Tensor::zeros(bv.shape());
                        for (k, gk) in g.data().iter().enumerate() {
                            let d = match kind {
                                Bin::Add => *gk,
                                Bin::Sub => -gk,
                                Bin::Mul => gk * av.data()[ia(k)],
                                Bin::Div => {
                                    let q = bv.data()[ib(k)];
                                    -gk * av.data()[ia(k)] / (q * q)
                                }
                            };
                            gb.data_mut()[ib(k)] += d;
                        }
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::MulScalar(a, c) => acc(&mut grads, *a, g.map(|v| v * c)),
                Op::Unary(u, a) => {
                    let x = &nodes[*a].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .zip(y.data())
                        .map(|((&gk, &xk), &yk)| {
                            gk * match *u {
                                Unary::Exp => yk,
                                Unary::Log => 1.0 / xk,
                                Unary::Tanh => 1.0 - yk * yk,
                                Unary::Sigmoid => yk * (1.0 - yk),
                                Unary::Elu => {
                                    if xk > 0.0 {
                                        1.0
                                    } else {
                                        yk + 1.0
                                    }
                                }
                                Unary::LeakyRelu(s) => {
                                    if xk > 0.0 {
                                        1.0
                                    } else {
                                        s
                                    }
                                }
                                Unary::Softplus => sigmoid(xk),
                                Unary::ClampMin(m) => {
                                    if xk > m {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::Sqrt => 0.5 / yk,
                            }
                        })
                        .collect();
                    acc(&mut grads, *a, Tensor::new(x.shape().to_vec(), data)?);
                }
                Op::Reshape(a) => {
                    let shape = nodes[*a].value.shape().to_vec();
                    acc(&mut grads, *a, g.reshaped(shape)?);
                }
                Op::Concat { inputs, axis } => {
                    let (outer, total, inner) = split_axis(y.shape(), *axis);
                    let mut offset = 0;
                    for &j in inputs {
                        let s = nodes[j].value.shape();
                        let n = s[*axis];
                        if nodes[j].requires_grad {
                            let mut data = Vec::with_capacity(outer * n * inner);
                            for o in 0..outer {
                                let base = (o * total + offset) * inner;
                                data.extend_from_slice(&g.data()[base..base + n * inner]);
                            }
                            acc(&mut grads, j, Tensor::new(s.to_vec(), data)?);
                        }
                        offset += n;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let s = nodes[*x].value.shape();
                    let (outer, n, inner) = split_axis(s, *axis);
                    let len = y.shape()[*axis];
                    let mut gx = Tensor::zeros(s);
                    for o in 0..outer {
                        let src = o * len * inner;
                        let dst = (o * n + start) * inner;
                        gx.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    acc(&mut grads, *a, Tensor::full(nodes[*a].value.shape(), gv));
                }
                Op::Mean(a) => {
                    let n = nodes[*a].value.numel() as f64;
                    acc(&mut grads, *a, Tensor::full(nodes[*a].value.shape(), g.data()[0] / n));
                }
                Op::SumAxis { x, axis } => {
                    let s = nodes[*x].value.shape();
                    let (outer, n, inner) = split_axis(s, *axis);
                    let mut gx = Tensor::zeros(s);
                    for o in 0..outer {
                        for a in 0..n {
                            for j in 0..inner {
                                gx.data_mut()[(o * n + a) * inner + j] = g.data()[o * inner + j];
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SegmentSoftmax { x, seg } => {
                    let (e, h) = rows(y.shape());
                    let nseg = seg.iter().max().map_or(0, |m| m + 1);
                    let mut dot = vec![0.0; nseg * h];
                    for k in 0..e * h {
                        dot[seg[k / h] * h + k % h] += g.data()[k] * y.data()[k];
                    }
                    let data = (0..e * h)
                        .map(|k| y.data()[k] * (g.data()[k] - dot[seg[k / h] * h + k % h]))
                        .collect();
                    acc(&mut grads, *x, Tensor::new(y.shape().to_vec(), data)?);
                }
                Op::LayerNorm { x, xhat, inv_std } => {
                    let d = *y.shape().last().unwrap();
                    let mut data = Vec::with_capacity(y.numel());
                    for (r, s) in inv_std.iter().enumerate() {
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mg = gr.iter().sum::<f64>() / d as f64;
                        let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        data.extend(gr.iter().zip(xr).map(|(gk, xk)| s * (gk - mg - xk * mgx)));
                    }
                    acc(&mut grads, *x, Tensor::new(y.shape().to_vec(), data)?);
                }
                Op::GatherRows { x, idx } => {
                    let s = nodes[*x].value.shape();
                    let (_, w) = rows(s);
                    let mut gx = Tensor::zeros(s);
                    for (e, &j) in idx.iter().enumerate() {
                        for c in 0..w {
                            gx.data_mut()[j * w + c] += g.data()[e * w + c];
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::ScatterAddRows { x, idx } => {
                    let s = nodes[*x].value.shape();
                    let (_, w) = rows(s);
                    let mut data = Vec::with_capacity(idx.len() * w);
                    for &j in idx {
                        data.extend_from_slice(&g.data()[j * w..(j + 1) * w]);
                    }
                    acc(&mut grads, *x, Tensor::new(s.to_vec(), data)?);
                }
            }
        }

        let mut named = BTreeMap::new();
        for (name, i) in &self.params {
            let g = grads[*i].clone().unwrap_or_else(|| Tensor::zeros(nodes[*i].value.shape()));
            match named.get_mut(name) {
                Some(prev) => Tensor::add_assign(prev, &g),
                None => {
                    named.insert(name.clone(), g);
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { tape: self.id, leaves: grads, shapes, named })
    }
}

/// Leaf gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u32,
    leaves: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    named: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient of a leaf; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape || v.index() >= self.leaves.len() {
            return None;
        }
        Some(self.leaves[v.index()].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.index()])))
    }

    /// Gradients of the named parameters. A name bound more than once
    /// receives the sum.
    pub fn named(&self) -> &BTreeMap<String, Tensor> {
        &self.named
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor> {
        self.named
    }
}
