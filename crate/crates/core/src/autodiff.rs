//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records one node per operation whose inputs include at least
//! one tracked value. Constants never enter the tape, so their gradients are
//! simply absent. A non-recording tape (see [`Tape::no_grad`]) evaluates the
//! same graph without storing anything, for inference and benchmarks.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::tensor::{kernels, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar(f64),
    Neg,
    Abs,
    Square,
    Exp,
    Tanh,
    Sqrt,
    Sigmoid,
    Clamp { lo: f64, hi: f64 },
    Gelu,
    MatMul,
    Permute(Vec<usize>),
    Reshape,
    SumAll,
    MeanAll,
    SumAxis { keep_shape: Vec<usize> },
    SoftmaxLast,
    LayerNorm { xhat: Tensor, rstd: Vec<f64> },
    CrossEntropy { probs: Tensor, labels: Vec<usize> },
    GatherRows { idx: Vec<usize>, rows: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::AddScalar => "add_scalar",
            Op::MulScalar(_) => "mul_scalar",
            Op::Neg => "neg",
            Op::Abs => "abs",
            Op::Square => "square",
            Op::Exp => "exp",
            Op::Tanh => "tanh",
            Op::Sqrt => "sqrt",
            Op::Sigmoid => "sigmoid",
            Op::Clamp { .. } => "clamp",
            Op::Gelu => "gelu",
            Op::MatMul => "matmul",
            Op::Permute(_) => "permute",
            Op::Reshape => "reshape",
            Op::SumAll => "sum",
            Op::MeanAll => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::SoftmaxLast => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::GatherRows { .. } => "gather_rows",
        }
    }
}

struct Input {
    id: Option<usize>,
    value: Rc<Tensor>,
}

struct Node {
    op: Op,
    inputs: Vec<Input>,
    value: Rc<Tensor>,
}

/// Append-only record of tracked operations.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
    check_finite: Cell<bool>,
    first_nonfinite: RefCell<Option<String>>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            check_finite: Cell::new(cfg!(debug_assertions)),
            first_nonfinite: RefCell::new(None),
        }
    }

    /// A tape that never records; every value it produces is a constant.
    pub fn no_grad() -> Self {
        Tape {
            recording: false,
            ..Tape::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Enables or disables the per-op non-finite sentinel.
    pub fn set_check_finite(&self, on: bool) {
        self.check_finite.set(on);
    }

    /// Name of the first op that produced a non-finite value, if any.
    pub fn first_nonfinite(&self) -> Option<String> {
        self.first_nonfinite.borrow().clone()
    }

    /// A tracked leaf (a parameter or an input we want gradients for).
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        let value = Rc::new(t);
        if !self.recording {
            return Var {
                tape: self,
                id: None,
                value,
            };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: value.clone(),
        });
        Var {
            tape: self,
            id: Some(nodes.len() - 1),
            value,
        }
    }

    /// An untracked value.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        Var {
            tape: self,
            id: None,
            value: Rc::new(t),
        }
    }

    fn push<'t>(&'t self, op: Op, inputs: &[&Var<'t>], out: Tensor) -> Var<'t> {
        if self.check_finite.get() && !out.is_finite() {
            let mut first = self.first_nonfinite.borrow_mut();
            if first.is_none() {
                log::warn!("non-finite value produced by {}", op.name());
                *first = Some(op.name().to_string());
            }
        }
        let value = Rc::new(out);
        if !self.recording || inputs.iter().all(|v| v.id.is_none()) {
            return Var {
                tape: self,
                id: None,
                value,
            };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            inputs: inputs
                .iter()
                .map(|v| Input {
                    id: v.id,
                    value: v.value.clone(),
                })
                .collect(),
            value: value.clone(),
        });
        Var {
            tape: self,
            id: Some(nodes.len() - 1),
            value,
        }
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        if loss.value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        let Some(root) = loss.id else {
            return Ok(Gradients { grads });
        };
        grads[root] = Some(Tensor::ones(loss.value.shape()));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let in_grads = input_grads(node, &g)?;
            for (inp, ig) in node.inputs.iter().zip(in_grads) {
                if let (Some(iid), Some(ig)) = (inp.id, ig) {
                    grads[iid] = Some(match grads[iid].take() {
                        Some(acc) => acc.zip_with(&ig, |a, b| a + b)?,
                        None => ig,
                    });
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` for constants and
    /// values the loss does not depend on.
    pub fn get(&self, v: &Var<'_>) -> Option<&Tensor> {
        v.id.and_then(|i| self.grads.get(i)).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but returns zeros where no gradient exists.
    pub fn get_or_zeros(&self, v: &Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.value.shape()))
    }
}

/// Handle to a value computed on a [`Tape`].
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: Option<usize>,
    value: Rc<Tensor>,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        Var {
            tape: self.tape,
            id: None,
            value: self.value.clone(),
        }
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let out = self.value.map(f);
        self.tape.push(op, &[self], out)
    }

    pub fn add(&self, o: &Var<'t>) -> Result<Var<'t>> {
        let out = self.value.add(&o.value)?;
        Ok(self.tape.push(Op::Add, &[self, o], out))
    }

    pub fn sub(&self, o: &Var<'t>) -> Result<Var<'t>> {
        let out = self.value.sub(&o.value)?;
        Ok(self.tape.push(Op::Sub, &[self, o], out))
    }

    pub fn mul(&self, o: &Var<'t>) -> Result<Var<'t>> {
        let out = self.value.mul(&o.value)?;
        Ok(self.tape.push(Op::Mul, &[self, o], out))
    }

    pub fn div(&self, o: &Var<'t>) -> Result<Var<'t>> {
        let out = self.value.div(&o.value)?;
        Ok(self.tape.push(Op::Div, &[self, o], out))
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        self.unary(Op::AddScalar, |v| v + s)
    }

    pub fn mul_scalar(&self, s: f64) -> Var<'t> {
        let out = self.value.mul_scalar(s);
        self.tape.push(Op::MulScalar(s), &[self], out)
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(Op::Neg, |v| -v)
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(Op::Abs, f64::abs)
    }

    pub fn square(&self) -> Var<'t> {
        crate::macs::add(self.value.numel() as u64);
        self.unary(Op::Square, |v| v * v)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(Op::Sqrt, f64::sqrt)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid, sigmoid)
    }

    /// Clamps into `[lo, hi]`; the gradient is 1 strictly inside, 0 elsewhere.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp { lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn relu(&self) -> Var<'t> {
        self.clamp(0.0, f64::INFINITY)
    }

    /// `min(max(0, x), alpha)`.
    pub fn relu_alpha(&self, alpha: f64) -> Result<Var<'t>> {
        if !(alpha > 0.0) {
            return Err(Error::config(format!("relu cap must be positive, got {alpha}")));
        }
        Ok(self.clamp(0.0, alpha))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(Op::Gelu, gelu)
    }

    /// Batched matrix product over the last two axes; see [`Tensor::matmul`].
    pub fn matmul(&self, o: &Var<'t>) -> Result<Var<'t>> {
        let out = self.value.matmul(&o.value)?;
        Ok(self.tape.push(Op::MatMul, &[self, o], out))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let out = self.value.permute(perm)?;
        Ok(self.tape.push(Op::Permute(perm.to_vec()), &[self], out))
    }

    pub fn transpose_last2(&self) -> Result<Var<'t>> {
        let r = self.value.rank();
        if r < 2 {
            return Err(Error::shape("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value.reshape(shape)?;
        Ok(self.tape.push(Op::Reshape, &[self], out))
    }

    pub fn sum(&self) -> Var<'t> {
        let out = Tensor::scalar(self.value.sum());
        self.tape.push(Op::SumAll, &[self], out)
    }

    pub fn mean(&self) -> Var<'t> {
        let out = Tensor::scalar(self.value.mean());
        self.tape.push(Op::MeanAll, &[self], out)
    }

    /// Sums over `axis`, keeping it with size 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let shape = self.value.shape();
        if axis >= shape.len() {
            return Err(Error::shape(format!("axis {axis} out of range for {shape:?}")));
        }
        let mut keep = shape.to_vec();
        keep[axis] = 1;
        let out = self.value.sum_to_shape(&keep)?;
        Ok(self.tape.push(Op::SumAxis { keep_shape: keep }, &[self], out))
    }

    /// Mean over `axis`, keeping it with size 1.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let n = *self
            .value
            .shape()
            .get(axis)
            .ok_or_else(|| Error::shape(format!("axis {axis} out of range")))?;
        Ok(self.sum_axis(axis)?.mul_scalar_uncounted(1.0 / n as f64))
    }

    fn mul_scalar_uncounted(&self, s: f64) -> Var<'t> {
        self.unary(Op::MulScalar(s), |v| v * s)
    }

    /// Softmax along the last axis.
    pub fn softmax_last(&self) -> Var<'t> {
        let out = softmax_rows(&self.value);
        self.tape.push(Op::SoftmaxLast, &[self], out)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: &Var<'t>, beta: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = &self.value;
        let d = *x.shape().last().expect("rank >= 1");
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape(format!(
                "layer norm affine params must be [{d}], got {:?} and {:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let rows = x.numel() / d;
        let mut xhat = Vec::with_capacity(x.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.numel());
        let (g, b) = (gamma.value.data(), beta.value.data());
        for row in x.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        crate::macs::add(2 * x.numel() as u64);
        let xhat = Tensor::from_parts(x.shape().to_vec(), xhat);
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.tape.push(Op::LayerNorm { xhat, rstd }, &[self, gamma, beta], out))
    }

    /// Mean cross-entropy of `(B, C)` logits against integer labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let shape = self.value.shape();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape(format!(
                "cross entropy needs (B, C) logits matching {} labels, got {shape:?}",
                labels.len()
            )));
        }
        let c = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::shape(format!("label {bad} out of range for {c} classes")));
        }
        let probs = softmax_rows(&self.value);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -probs.data()[i * c + l].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / labels.len() as f64;
        Ok(self.tape.push(
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            &[self],
            Tensor::scalar(loss),
        ))
    }

    /// Picks rows along axis 1: `(B, N, E)` with `idx` of `B * k` entries
    /// gives `(B, k, E)`.
    pub fn gather_rows(&self, idx: &[usize], k: usize) -> Result<Var<'t>> {
        let shape = self.value.shape();
        if shape.len() != 3 || idx.len() != shape[0] * k {
            return Err(Error::shape(format!(
                "gather_rows needs (B, N, E) and B*k indices, got {shape:?} and {}",
                idx.len()
            )));
        }
        let (b, n, e) = (shape[0], shape[1], shape[2]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape(format!("row index {bad} out of range {n}")));
        }
        let src = self.value.data();
        let mut out = Vec::with_capacity(b * k * e);
        for bi in 0..b {
            for &r in &idx[bi * k..(bi + 1) * k] {
                out.extend_from_slice(&src[(bi * n + r) * e..(bi * n + r + 1) * e]);
            }
        }
        Ok(self.tape.push(
            Op::GatherRows {
                idx: idx.to_vec(),
                rows: n,
            },
            &[self],
            Tensor::from_parts(vec![b, k, e], out),
        ))
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable softmax over the last axis.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let d = *x.shape().last().expect("rank >= 1");
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(d) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut s = 0.0;
        for &v in row {
            let e = (v - m).exp();
            s += e;
            out.push(e);
        }
        for o in &mut out[start..] {
            *o /= s;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn map2(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

fn input_grads(node: &Node, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
    let inp = &node.inputs;
    let x = || inp[0].value.as_ref();
    let want = |i: usize| inp[i].id.is_some();
    let y = node.value.as_ref();
    Ok(match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add | Op::Sub => {
            let ga = if want(0) { Some(g.sum_to_shape(x().shape())?) } else { None };
            let gb = if want(1) {
                let gb = g.sum_to_shape(inp[1].value.shape())?;
                Some(if matches!(node.op, Op::Sub) { gb.map(|v| -v) } else { gb })
            } else {
                None
            };
            vec![ga, gb]
        }
        Op::Mul => {
            let (a, b) = (x(), inp[1].value.as_ref());
            let ga = if want(0) {
                Some(g.zip_with(b, |g, b| g * b)?.sum_to_shape(a.shape())?)
            } else {
                None
            };
            let gb = if want(1) {
                Some(g.zip_with(a, |g, a| g * a)?.sum_to_shape(b.shape())?)
            } else {
                None
            };
            vec![ga, gb]
        }
        Op::Div => {
            let (a, b) = (x(), inp[1].value.as_ref());
            let ga = if want(0) {
                Some(g.zip_with(b, |g, b| g / b)?.sum_to_shape(a.shape())?)
            } else {
                None
            };
            let gb = if want(1) {
                // d(a/b)/db = -y/b
                let t = g.zip_with(y, |g, y| g * y)?.zip_with(b, |t, b| -t / b)?;
                Some(t.sum_to_shape(b.shape())?)
            } else {
                None
            };
            vec![ga, gb]
        }
        Op::AddScalar | Op::Reshape => vec![Some(g.reshape(x().shape())?)],
        Op::MulScalar(s) => vec![Some(g.map(|v| v * s))],
        Op::Neg => vec![Some(g.map(|v| -v))],
        Op::Abs => vec![Some(map2(g, x(), |g, v| {
            if v > 0.0 {
                g
            } else if v < 0.0 {
                -g
            } else {
                0.0
            }
        }))],
        Op::Square => vec![Some(map2(g, x(), |g, v| 2.0 * v * g))],
        Op::Exp => vec![Some(map2(g, y, |g, y| g * y))],
        Op::Tanh => vec![Some(map2(g, y, |g, y| g * (1.0 - y * y)))],
        Op::Sqrt => vec![Some(map2(g, y, |g, y| if y > 0.0 { 0.5 * g / y } else { 0.0 }))],
        Op::Sigmoid => vec![Some(map2(g, y, |g, y| g * y * (1.0 - y)))],
        Op::Clamp { lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            vec![Some(map2(g, x(), |g, v| if v > lo && v < hi { g } else { 0.0 }))]
        }
        Op::Gelu => vec![Some(map2(g, x(), |g, v| g * gelu_grad(v)))],
        Op::MatMul => matmul_grads(x(), &inp[1].value, g, want(0), want(1))?,
        Op::Permute(perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            vec![Some(g.permute(&inv)?)]
        }
        Op::SumAll => vec![Some(Tensor::full(x().shape(), g.data()[0]))],
        Op::MeanAll => {
            let n = x().numel() as f64;
            vec![Some(Tensor::full(x().shape(), g.data()[0] / n))]
        }
        Op::SumAxis { keep_shape, .. } => {
            vec![Some(g.reshape(keep_shape)?.broadcast_to(x().shape())?)]
        }
        Op::SoftmaxLast => {
            let d = *y.shape().last().unwrap();
            let mut out = Vec::with_capacity(y.numel());
            for (yr, gr) in y.data().chunks(d).zip(g.data().chunks(d)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                out.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
            }
            vec![Some(Tensor::from_parts(y.shape().to_vec(), out))]
        }
        Op::LayerNorm { xhat, rstd } => {
            let gamma = inp[1].value.data();
            let d = gamma.len();
            let mut gx = Vec::with_capacity(xhat.numel());
            let mut ggamma = vec![0.0; d];
            let mut gbeta = vec![0.0; d];
            for ((hr, gr), &r) in xhat.data().chunks(d).zip(g.data().chunks(d)).zip(rstd) {
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for j in 0..d {
                    let gh = gr[j] * gamma[j];
                    m1 += gh;
                    m2 += gh * hr[j];
                    ggamma[j] += gr[j] * hr[j];
                    gbeta[j] += gr[j];
                }
                m1 /= d as f64;
                m2 /= d as f64;
                for j in 0..d {
                    gx.push(r * (gr[j] * gamma[j] - m1 - hr[j] * m2));
                }
            }
            vec![
                Some(Tensor::from_parts(xhat.shape().to_vec(), gx)),
                Some(Tensor::from_parts(vec![d], ggamma)),
                Some(Tensor::from_parts(vec![d], gbeta)),
            ]
        }
        Op::CrossEntropy { probs, labels } => {
            let c = probs.shape()[1];
            let scale = g.data()[0] / labels.len() as f64;
            let mut out = probs.data().to_vec();
            for (i, &l) in labels.iter().enumerate() {
                out[i * c + l] -= 1.0;
            }
            out.iter_mut().for_each(|v| *v *= scale);
            vec![Some(Tensor::from_parts(probs.shape().to_vec(), out))]
        }
        Op::GatherRows { idx, rows } => {
            let shape = g.shape();
            let (b, k, e) = (shape[0], shape[1], shape[2]);
            let mut out = vec![0.0; b * rows * e];
            for bi in 0..b {
                for (j, &r) in idx[bi * k..(bi + 1) * k].iter().enumerate() {
                    let src = &g.data()[(bi * k + j) * e..(bi * k + j + 1) * e];
                    let dst = &mut out[(bi * rows + r) * e..(bi * rows + r + 1) * e];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![b, *rows, e], out))]
        }
    })
}

fn matmul_grads(a: &Tensor, b: &Tensor, g: &Tensor, wa: bool, wb: bool) -> Result<Vec<Option<Tensor>>> {
    let ar = a.rank();
    let (m, k) = (a.shape()[ar - 2], a.shape()[ar - 1]);
    let n = b.shape()[b.rank() - 1];
    let batch = a.numel() / (m * k);
    let mut ga = None;
    let mut gb = None;
    if wa {
        let mut out = vec![0.0; a.numel()];
        if b.rank() == 2 {
            kernels::gemm_nt(g.data(), b.data(), &mut out, batch * m, n, k);
        } else {
            for bi in 0..batch {
                kernels::gemm_nt(
                    &g.data()[bi * m * n..(bi + 1) * m * n],
                    &b.data()[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * k..(bi + 1) * m * k],
                    m,
                    n,
                    k,
                );
            }
        }
        crate::macs::add((batch * m * n * k) as u64);
        ga = Some(Tensor::from_parts(a.shape().to_vec(), out));
    }
    if wb {
        let mut out = vec![0.0; b.numel()];
        if b.rank() == 2 {
            kernels::gemm_tn(a.data(), g.data(), &mut out, k, batch * m, n);
        } else {
            for bi in 0..batch {
                kernels::gemm_tn(
                    &a.data()[bi * m * k..(bi + 1) * m * k],
                    &g.data()[bi * m * n..(bi + 1) * m * n],
                    &mut out[bi * k * n..(bi + 1) * k * n],
                    k,
                    m,
                    n,
                );
            }
        }
        crate::macs::add((batch * m * n * k) as u64);
        gb = Some(Tensor::from_parts(b.shape().to_vec(), out));
    }
    Ok(vec![ga, gb])
}

/// Central finite-difference check of `f` at `inputs`.
///
/// Returns the largest `|analytic - numeric| / max(|analytic|, |numeric|, 1)`
/// over every input element.
pub fn gradcheck<F>(inputs: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();

    let eval = |ins: &[Tensor]| -> Result<f64> {
        let t = Tape::no_grad();
        let vs: Vec<Var<'_>> = ins.iter().map(|x| t.constant(x.clone())).collect();
        f(&t, &vs)?.value().item()
    };
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let fp = eval(&probe)?;
            probe[i].data_mut()[j] = orig - h;
            let fm = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let num = (fp - fm) / (2.0 * h);
            let ana = analytic[i].data()[j];
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_sum_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let loss = x.square().sum();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constants_have_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let loss = x.mul(&c).unwrap().sum();
        let g = tape.backward(&loss).unwrap();
        assert!(g.get(&c).is_none());
        assert_eq!(g.get(&x).unwrap().data(), &[3.0, 4.0]);
        let unused = tape.leaf(t(&[1], &[1.0]));
        assert!(g.get(&unused).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn relu_alpha_examples() {
        let tape = Tape::no_grad();
        let x = tape.constant(t(&[3], &[7.0, -3.0, 2.5]));
        assert_eq!(x.relu_alpha(6.0).unwrap().value().data(), &[6.0, 0.0, 2.5]);
        assert!(matches!(x.relu_alpha(0.0), Err(Error::Config(_))));
        assert!(matches!(x.relu_alpha(-1.0), Err(Error::Config(_))));
    }

    #[test]
    fn softmax_and_cross_entropy_examples() {
        let tape = Tape::no_grad();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        assert_eq!(x.softmax_last().value().data(), &[0.5, 0.5]);
        let logits = tape.constant(Tensor::zeros(&[1, 10]));
        let ce = logits.cross_entropy(&[3]).unwrap().value().item().unwrap();
        assert!((ce - 10f64.ln()).abs() < 1e-12);
        let c = tape.constant(Tensor::full(&[2, 5, 3], 1.75));
        let pooled = c.mean_axis(1).unwrap();
        assert!(pooled.value().data().iter().all(|&v| (v - 1.75).abs() < 1e-15));
    }

    #[test]
    fn nonfinite_sentinel_records_first_op() {
        let tape = Tape::new();
        tape.set_check_finite(true);
        let x = tape.leaf(t(&[1], &[1000.0]));
        let y = x.exp().mul_scalar(0.0);
        assert!(!y.value().data()[0].is_finite());
        assert_eq!(tape.first_nonfinite().as_deref(), Some("exp"));
    }

    #[test]
    fn no_grad_tape_stores_nothing() {
        let tape = Tape::no_grad();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let _ = x.square().sum();
        assert!(tape.is_empty());
        assert!(!x.is_tracked());
    }

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::uniform(shape, -2.0, 2.0, rng)
    }

    /// Keeps values away from the non-differentiable points of abs/clamp.
    fn away_from_kinks(t: Tensor, kinks: &[f64]) -> Tensor {
        t.map(|v| {
            let mut v = v;
            for &k in kinks {
                if (v - k).abs() < 1e-3 {
                    v = k + 1e-2;
                }
            }
            v
        })
    }

    #[test]
    fn gradcheck_every_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let a = rand_t(&[2, 3], &mut rng);
            let b = rand_t(&[2, 3], &mut rng);
            let row = rand_t(&[3], &mut rng);
            let pos = rand_t(&[2, 3], &mut rng).map(|v| v.abs() + 0.5);
            let w = rand_t(&[3, 4], &mut rng);
            let ak = away_from_kinks(a.clone(), &[0.0, 1.0]);
            let checks: Vec<(&str, f64)> = vec![
                (
                    "add",
                    gradcheck(&[a.clone(), row.clone()], 1e-5, |_, v| Ok(v[0].add(&v[1])?.square().sum())).unwrap(),
                ),
                (
                    "sub",
                    gradcheck(&[a.clone(), b.clone()], 1e-5, |_, v| Ok(v[0].sub(&v[1])?.square().sum())).unwrap(),
                ),
                (
                    "mul",
                    gradcheck(&[a.clone(), row.clone()], 1e-5, |_, v| Ok(v[0].mul(&v[1])?.sum())).unwrap(),
                ),
                (
                    "div",
                    gradcheck(&[a.clone(), pos.clone()], 1e-5, |_, v| Ok(v[0].div(&v[1])?.sum())).unwrap(),
                ),
                (
                    "scalar",
                    gradcheck(std::slice::from_ref(&a), 1e-5, |_, v| {
                        Ok(v[0].mul_scalar(1.5).add_scalar(0.5).neg().square().mean())
                    })
                    .unwrap(),
                ),
                (
                    "abs",
                    gradcheck(std::slice::from_ref(&ak), 1e-5, |_, v| Ok(v[0].abs().mul(&v[0])?.sum())).unwrap(),
                ),
                (
                    "exp_tanh",
                    gradcheck(std::slice::from_ref(&a), 1e-5, |_, v| Ok(v[0].exp().tanh().sum())).unwrap(),
                ),
                (
                    "sqrt",
                    gradcheck(std::slice::from_ref(&pos), 1e-5, |_, v| Ok(v[0].sqrt().sum())).unwrap(),
                ),
                (
                    "sigmoid",
                    gradcheck(std::slice::from_ref(&a), 1e-5, |_, v| Ok(v[0].sigmoid().square().sum())).unwrap(),
                ),
                (
                    "clamp",
                    gradcheck(std::slice::from_ref(&ak), 1e-5, |_, v| {
                        Ok(v[0].mul_scalar(3.0).relu_alpha(6.0)?.square().sum())
                    })
                    .unwrap(),
                ),
                (
                    "gelu",
                    gradcheck(std::slice::from_ref(&a), 1e-5, |_, v| Ok(v[0].gelu().sum())).unwrap(),
                ),
                (
                    "matmul",
                    gradcheck(&[a.clone(), w.clone()], 1e-5, |_, v| Ok(v[0].matmul(&v[1])?.tanh().sum())).unwrap(),
                ),
                (
                    "permute",
                    gradcheck(&[a.clone(), b.clone()], 1e-5, |_, v| {
                        Ok(v[0].transpose_last2()?.reshape(&[6])?.mul(&v[1].reshape(&[6])?)?.sum())
                    })
                    .unwrap(),
                ),
                (
                    "sum_axis",
                    gradcheck(std::slice::from_ref(&a), 1e-5, |_, v| Ok(v[0].sum_axis(0)?.square().sum())).unwrap(),
                ),
                (
                    "mean_axis",
                    gradcheck(std::slice::from_ref(&a), 1e-5, |_, v| Ok(v[0].mean_axis(1)?.square().sum())).unwrap(),
                ),
                (
                    "softmax",
                    gradcheck(&[a.clone(), b.clone()], 1e-5, |_, v| Ok(v[0].softmax_last().mul(&v[1])?.sum())).unwrap(),
                ),
                (
                    "layer_norm",
                    gradcheck(&[a.clone(), row.clone(), row.map(|v| v * 0.5), b.clone()], 1e-5, |_, v| {
                        Ok(v[0].layer_norm(&v[1], &v[2], 1e-5)?.mul(&v[3])?.sum())
                    })
                    .unwrap(),
                ),
                (
                    "cross_entropy",
                    gradcheck(std::slice::from_ref(&a), 1e-5, |_, v| v[0].cross_entropy(&[2, 0])).unwrap(),
                ),
                (
                    "gather",
                    gradcheck(&[a.reshape(&[1, 2, 3]).unwrap()], 1e-5, |_, v| {
                        Ok(v[0].gather_rows(&[1, 1, 0], 3)?.square().sum())
                    })
                    .unwrap(),
                ),
            ];
            for (name, err) in checks {
                assert!(err < 1e-5, "{name}: relative error {err}");
            }
        }
    }

    #[test]
    fn batched_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_t(&[2, 3, 4], &mut rng);
        let b = rand_t(&[2, 4, 2], &mut rng);
        let err = gradcheck(&[a, b], 1e-5, |_, v| Ok(v[0].matmul(&v[1])?.square().sum())).unwrap();
        assert!(err < 1e-5);
    }

    #[test]
    fn replay_is_bitwise_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let tape = Tape::new();
            let x = tape.leaf(rand_t(&[4, 5], &mut rng));
            let w = tape.leaf(rand_t(&[5, 3], &mut rng));
            let l = x.matmul(&w).unwrap().gelu().softmax_last().square().sum();
            let g = tape.backward(&l).unwrap();
            (l.value().item().unwrap().to_bits(), g.get(&w).unwrap().clone())
        };
        assert_eq!(run(), run());
    }
}
