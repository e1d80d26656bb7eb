//! Dense `f64` tensors and a tape for reverse-mode differentiation.
//!
//! A [`Graph`] records one forward pass. Every op checks shapes, computes its
//! value eagerly and rejects non-finite results. [`Graph::backward`] walks
//! the tape in reverse and returns gradients for every node that depends on
//! a leaf created with `requires_grad`.

mod adam;
pub mod conv;
mod gru;

use alloc::vec;
use alloc::vec::Vec;
use core::mem;
use thiserror::Error;

pub use adam::{adam_step, AdamState};
pub use gru::{Activation, GruWeights};

use conv::{conv3d_backward, conv3d_forward, gemm, TAPS};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: &'static str },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("spatial dims not divisible by pooling factor {factor}")]
    NonDivisibleDims { factor: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}

type Result<T> = core::result::Result<T, AutodiffError>;

fn mismatch(op: &'static str, detail: &'static str) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(mismatch("tensor", "data length differs from shape product"));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape, vec![0.0; shape.iter().product()]).unwrap()
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(&[1], vec![v]).unwrap()
    }

    /// A trainable leaf.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let mut t = Self::new(shape, data)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(mismatch("accumulate_grad", "gradient length differs from tensor"));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv3d { x: Var, w: Var, b: Var },
    Tanh(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    OneMinus(Var),
    Scale(Var, f64),
    /// `[T,H,W,C] * [T,H,W,1]`, broadcasting the mask over channels.
    MaskMul { x: Var, m: Var },
    AvgPool { x: Var, factor: usize },
    GlobalPool(Var),
    Dropout { x: Var, keep: Vec<f64> },
    MatMul(Var, Var),
    AddBias(Var, Var),
    Reshape(Var),
    Slice { a: Var, r0: usize, c0: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    ReverseRows(Var),
    Mse(Var, Var),
    Mae(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients from one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn ensure_finite(op: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(AutodiffError::NonFinite { op })
    }
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v), self.value(v).to_vec()).unwrap()
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op, rg: bool) -> Result<Var> {
        ensure_finite(op_name, &value)?;
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad: rg,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a tensor as a leaf; gradients flow to it iff `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push("leaf", t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(mismatch("constant", "data length differs from shape product"));
        }
        self.push("constant", shape.to_vec(), data, Op::Leaf, false)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || xs.iter().any(|&d| d == 0) {
            return Err(mismatch("conv3d", "input must be [T,H,W,C] with non-zero dims"));
        }
        if ws.len() != 5 || ws[..3] != [3, 3, 3] || ws[3] != xs[3] {
            return Err(mismatch("conv3d", "kernel must be [3,3,3,Cin,Cout]"));
        }
        let cout = ws[4];
        if self.shape(b) != [cout] {
            return Err(mismatch("conv3d", "bias must be [Cout]"));
        }
        let dims = [xs[0], xs[1], xs[2], xs[3]];
        let y = conv3d_forward(self.value(x), dims, self.value(w), self.value(b), cout);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push("conv3d", vec![xs[0], xs[1], xs[2], cout], y, Op::Conv3d { x, w, b }, rg)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let y = self.value(a).iter().map(|&v| f(v)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(name, shape, y, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, libm::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        self.unary("one_minus", a, |v| 1.0 - v, Op::OneMinus(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |v| c * v, Op::Scale(a, c))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, "operands differ in shape"));
        }
        let y = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(name, shape, y, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Multiply `[T,H,W,C]` features by a `[T,H,W,1]` mask.
    pub fn mask_mul(&mut self, x: Var, m: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ms = self.shape(m);
        if xs.len() != 4 || ms.len() != 4 || ms[..3] != xs[..3] || ms[3] != 1 {
            return Err(mismatch("mask_mul", "mask must be [T,H,W,1] matching features"));
        }
        let c = xs[3];
        let mv = self.value(m);
        let y = self
            .value(x)
            .chunks_exact(c)
            .zip(mv)
            .flat_map(|(row, &s)| row.iter().map(move |v| v * s))
            .collect();
        let rg = self.rg(x) || self.rg(m);
        self.push("mask_mul", xs, y, Op::MaskMul { x, m }, rg)
    }

    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(mismatch("avg_pool", "input must be [T,H,W,C]"));
        }
        if factor == 0 || s[1] % factor != 0 || s[2] % factor != 0 {
            return Err(AutodiffError::NonDivisibleDims { factor });
        }
        let [t, h, w, c] = [s[0], s[1], s[2], s[3]];
        let (oh, ow) = (h / factor, w / factor);
        let xv = self.value(x);
        let mut y = vec![0.0; t * oh * ow * c];
        let inv = 1.0 / (factor * factor) as f64;
        for tt in 0..t {
            for yy in 0..h {
                for xx in 0..w {
                    let src = ((tt * h + yy) * w + xx) * c;
                    let dst = ((tt * oh + yy / factor) * ow + xx / factor) * c;
                    for k in 0..c {
                        y[dst + k] += xv[src + k] * inv;
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push("avg_pool", vec![t, oh, ow, c], y, Op::AvgPool { x, factor }, rg)
    }

    /// Mean over height and width: `[T,H,W,C] -> [T,C]`.
    pub fn global_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(mismatch("global_pool", "input must be [T,H,W,C]"));
        }
        let [t, h, w, c] = [s[0], s[1], s[2], s[3]];
        let xv = self.value(x);
        let inv = 1.0 / (h * w) as f64;
        let mut y = vec![0.0; t * c];
        for tt in 0..t {
            for p in 0..h * w {
                let src = (tt * h * w + p) * c;
                for k in 0..c {
                    y[tt * c + k] += xv[src + k] * inv;
                }
            }
        }
        let rg = self.rg(x);
        self.push("global_pool", vec![t, c], y, Op::GlobalPool(x), rg)
    }

    /// Inverted dropout. In eval mode, or with `rate == 0`, this is the
    /// identity and records nothing.
    pub fn dropout(&mut self, x: Var, rate: f64, train: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::InvalidArgument("dropout rate must be in [0, 1)"));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        use rand::Rng;
        let mut rng = crate::seed::rng(seed);
        let survive = 1.0 / (1.0 - rate);
        let keep: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { survive })
            .collect();
        let y = self.value(x).iter().zip(&keep).map(|(v, k)| v * k).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push("dropout", shape, y, Op::Dropout { x, keep }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", "expected [m,k] x [k,n]"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut y = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), k, 1, self.value(b), n, 1, 0.0, &mut y, n, 1);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", vec![m, n], y, Op::MatMul(a, b), rg)
    }

    /// Add a `[n]` bias to every row of `[m,n]`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || self.shape(b) != [sa[1]] {
            return Err(mismatch("add_bias", "expected [m,n] + [n]"));
        }
        let bv = self.value(b);
        let y = self
            .value(a)
            .chunks_exact(sa[1])
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push("add_bias", sa, y, Op::AddBias(a, b), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(mismatch("reshape", "element count changes"));
        }
        let y = self.value(a).to_vec();
        let rg = self.rg(a);
        self.push("reshape", shape.to_vec(), y, Op::Reshape(a), rg)
    }

    /// Rows `r0..r1` and columns `c0..c1` of a matrix.
    pub fn slice(&mut self, a: Var, r0: usize, r1: usize, c0: usize, c1: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || r0 >= r1 || c0 >= c1 || r1 > s[0] || c1 > s[1] {
            return Err(mismatch("slice", "range outside matrix"));
        }
        let av = self.value(a);
        let mut y = Vec::with_capacity((r1 - r0) * (c1 - c0));
        for r in r0..r1 {
            y.extend_from_slice(&av[r * s[1] + c0..r * s[1] + c1]);
        }
        let rg = self.rg(a);
        self.push("slice", vec![r1 - r0, c1 - c0], y, Op::Slice { a, r0, c0 }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutodiffError::InvalidArgument("concat of nothing"));
        }
        let m = self.shape(parts[0])[0];
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != m {
                return Err(mismatch("concat_cols", "row counts differ"));
            }
            total += s[1];
        }
        let mut y = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                let n = self.shape(p)[1];
                y.extend_from_slice(&self.value(p)[r * n..(r + 1) * n]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat_cols", vec![m, total], y, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutodiffError::InvalidArgument("concat of nothing"));
        }
        let n = self.shape(parts[0])[1];
        let mut rows = 0;
        let mut y = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != n {
                return Err(mismatch("concat_rows", "column counts differ"));
            }
            rows += s[0];
            y.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat_rows", vec![rows, n], y, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn reverse_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(mismatch("reverse_rows", "expected a matrix"));
        }
        let y = self.value(a).chunks_exact(s[1]).rev().flatten().copied().collect();
        let rg = self.rg(a);
        self.push("reverse_rows", s, y, Op::ReverseRows(a), rg)
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(mismatch("mse", "prediction and target differ in shape"));
        }
        let n = self.value(pred).len() as f64;
        let s: f64 = self.value(pred).iter().zip(self.value(target)).map(|(a, b)| (a - b) * (a - b)).sum();
        let rg = self.rg(pred) || self.rg(target);
        self.push("mse", vec![1], vec![s / n], Op::Mse(pred, target), rg)
    }

    pub fn mae(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(mismatch("mae", "prediction and target differ in shape"));
        }
        let n = self.value(pred).len() as f64;
        let s: f64 = self.value(pred).iter().zip(self.value(target)).map(|(a, b)| (a - b).abs()).sum();
        let rg = self.rg(pred) || self.rg(target);
        self.push("mae", vec![1], vec![s / n], Op::Mae(pred, target), rg)
    }

    /// Gradients of the scalar `out` with respect to every node that
    /// requires them.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.nodes[out.0].value.len() != 1 {
            return Err(mismatch("backward", "output must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            ensure_finite("backward", &g)?;
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        // Borrow the gradient buffer of `v`, allocating zeros on first use.
        fn buf<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b } => {
                let xs = &self.nodes[x.0].shape;
                let dims = [xs[0], xs[1], xs[2], xs[3]];
                let cout = node.shape[3];
                let mut dx = rg(*x).then(|| mem::take(buf(grads, *x, len(*x))));
                let mut dw = rg(*w).then(|| mem::take(buf(grads, *w, len(*w))));
                let mut db = rg(*b).then(|| mem::take(buf(grads, *b, len(*b))));
                conv3d_backward(
                    val(*x),
                    dims,
                    val(*w),
                    cout,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (v, d) in [(*x, dx), (*w, dw), (*b, db)] {
                    if let Some(d) = d {
                        grads[v.0] = Some(d);
                    }
                }
            }
            Op::Tanh(a) => {
                let d = buf(grads, *a, g.len());
                for ((d, g), y) in d.iter_mut().zip(g).zip(&node.value) {
                    *d += g * (1.0 - y * y);
                }
            }
            Op::Sigmoid(a) => {
                let d = buf(grads, *a, g.len());
                for ((d, g), y) in d.iter_mut().zip(g).zip(&node.value) {
                    *d += g * y * (1.0 - y);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if rg(*a) {
                    buf(grads, *a, g.len()).iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if rg(*b) {
                    buf(grads, *b, g.len()).iter_mut().zip(g).for_each(|(d, g)| *d += sign * g);
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let bv = val(*b);
                    let d = buf(grads, *a, g.len());
                    for i in 0..g.len() {
                        d[i] += g[i] * bv[i];
                    }
                }
                if rg(*b) {
                    let av = val(*a);
                    let d = buf(grads, *b, g.len());
                    for i in 0..g.len() {
                        d[i] += g[i] * av[i];
                    }
                }
            }
            Op::OneMinus(a) => {
                buf(grads, *a, g.len()).iter_mut().zip(g).for_each(|(d, g)| *d -= g);
            }
            Op::Scale(a, c) => {
                buf(grads, *a, g.len()).iter_mut().zip(g).for_each(|(d, g)| *d += c * g);
            }
            Op::MaskMul { x, m } => {
                let c = node.shape[3];
                if rg(*x) {
                    let mv = val(*m);
                    let d = buf(grads, *x, g.len());
                    for (p, &s) in mv.iter().enumerate() {
                        for k in 0..c {
                            d[p * c + k] += g[p * c + k] * s;
                        }
                    }
                }
                if rg(*m) {
                    let xv = val(*x);
                    let n = len(*m);
                    let d = buf(grads, *m, n);
                    for p in 0..n {
                        let mut acc = 0.0;
                        for k in 0..c {
                            acc += g[p * c + k] * xv[p * c + k];
                        }
                        d[p] += acc;
                    }
                }
            }
            Op::AvgPool { x, factor } => {
                let xs = &self.nodes[x.0].shape;
                let [t, h, w, c] = [xs[0], xs[1], xs[2], xs[3]];
                let (oh, ow) = (h / factor, w / factor);
                let inv = 1.0 / (factor * factor) as f64;
                let d = buf(grads, *x, t * h * w * c);
                for tt in 0..t {
                    for yy in 0..h {
                        for xx in 0..w {
                            let dst = ((tt * h + yy) * w + xx) * c;
                            let src = ((tt * oh + yy / factor) * ow + xx / factor) * c;
                            for k in 0..c {
                                d[dst + k] += g[src + k] * inv;
                            }
                        }
                    }
                }
            }
            Op::GlobalPool(x) => {
                let xs = &self.nodes[x.0].shape;
                let [t, h, w, c] = [xs[0], xs[1], xs[2], xs[3]];
                let inv = 1.0 / (h * w) as f64;
                let d = buf(grads, *x, t * h * w * c);
                for tt in 0..t {
                    for p in 0..h * w {
                        let dst = (tt * h * w + p) * c;
                        for k in 0..c {
                            d[dst + k] += g[tt * c + k] * inv;
                        }
                    }
                }
            }
            Op::Dropout { x, keep } => {
                let d = buf(grads, *x, g.len());
                for i in 0..g.len() {
                    d[i] += g[i] * keep[i];
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if rg(*a) {
                    let bv = val(*b);
                    let d = buf(grads, *a, m * k);
                    gemm(m, n, k, g, n, 1, bv, 1, n, 1.0, d, k, 1);
                }
                if rg(*b) {
                    let av = val(*a);
                    let d = buf(grads, *b, k * n);
                    gemm(k, m, n, av, 1, k, g, n, 1, 1.0, d, n, 1);
                }
            }
            Op::AddBias(a, b) => {
                let n = node.shape[1];
                if rg(*a) {
                    buf(grads, *a, g.len()).iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if rg(*b) {
                    let d = buf(grads, *b, n);
                    for row in g.chunks_exact(n) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Reshape(a) => {
                buf(grads, *a, g.len()).iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            Op::Slice { a, r0, c0 } => {
                let cols = self.nodes[a.0].shape[1];
                let (rows, w) = (node.shape[0], node.shape[1]);
                let d = buf(grads, *a, len(*a));
                for r in 0..rows {
                    let dst = (r0 + r) * cols + c0;
                    d[dst..dst + w].iter_mut().zip(&g[r * w..(r + 1) * w]).for_each(|(d, g)| *d += g);
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (node.shape[0], node.shape[1]);
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].shape[1];
                    if rg(p) {
                        let d = buf(grads, p, m * n);
                        for r in 0..m {
                            d[r * n..(r + 1) * n]
                                .iter_mut()
                                .zip(&g[r * total + off..r * total + off + n])
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                    off += n;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = len(p);
                    if rg(p) {
                        buf(grads, p, n).iter_mut().zip(&g[off..off + n]).for_each(|(d, g)| *d += g);
                    }
                    off += n;
                }
            }
            Op::ReverseRows(a) => {
                let n = node.shape[1];
                let d = buf(grads, *a, g.len());
                for (dr, gr) in d.chunks_exact_mut(n).zip(g.chunks_exact(n).rev()) {
                    dr.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                }
            }
            Op::Mse(p, t) | Op::Mae(p, t) => {
                let is_mse = matches!(node.op, Op::Mse(..));
                let (pv, tv) = (val(*p), val(*t));
                let n = pv.len();
                let scale = g[0] / n as f64;
                let local: Vec<f64> = pv
                    .iter()
                    .zip(tv)
                    .map(|(a, b)| {
                        let e = a - b;
                        if is_mse {
                            2.0 * e * scale
                        } else if e > 0.0 {
                            scale
                        } else if e < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if rg(*p) {
                    buf(grads, *p, n).iter_mut().zip(&local).for_each(|(d, l)| *d += l);
                }
                if rg(*t) {
                    buf(grads, *t, n).iter_mut().zip(&local).for_each(|(d, l)| *d -= l);
                }
            }
        }
    }
}

/// Number of weights feeding one output unit of a conv kernel.
pub fn conv_fan_in(cin: usize) -> usize {
    TAPS * cin
}

#[cfg(test)]
pub(crate) mod gradcheck {
    use super::*;

    /// Max relative error between analytic and central-difference
    /// gradients of `f` with respect to every element of every input.
    pub fn max_rel_error(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
        let run = |ts: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t).unwrap()).collect();
            let out = f(&mut g, &vars).unwrap();
            g.value(out)[0]
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t).unwrap()).collect();
        let out = f(&mut g, &vars).unwrap();
        let grads = g.backward(out).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (i, t) in inputs.iter().enumerate() {
            if !t.requires_grad {
                continue;
            }
            let analytic = grads.get(vars[i]).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]);
            for j in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[i].data[j] += h;
                let mut minus = inputs.to_vec();
                minus[i].data[j] -= h;
                let numeric = (run(&plus) - run(&minus)) / (2.0 * h);
                let a = analytic[j];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max((a - numeric).abs() / denom);
            }
        }
        worst
    }
}
