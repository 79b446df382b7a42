//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every operation is recorded as a node holding its inputs and its eagerly
//! computed value. The backward pass *emits new tape nodes* rather than raw
//! buffers, so gradients are themselves differentiable; that is what makes
//! exact second-order differentiation through an unrolled inner optimization
//! loop possible (see [`Tape::grad_vars`] and [`grad_through_inner_loop`]).
//!
//! The primitive set is deliberately small and closed under differentiation:
//! every vector-Jacobian product below is expressed with the same primitives.

use super::{matmul_data, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// matrix [r,c] + row vector [c], broadcast over rows
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    /// tensor * scalar node (both differentiable)
    MulScalarVar(usize, usize),
    Relu(usize),
    /// relu' with the subgradient at 0 fixed to 0; derivative contributes zero
    Step(usize),
    Sigmoid(usize),
    Sin(usize),
    Cos(usize),
    SumAll(usize),
    /// sum of elementwise products -> scalar
    Dot(usize, usize),
    /// scalar node broadcast to a shape
    BroadcastScalar(usize),
    /// [r,c] -> [c]
    SumRows(usize),
    /// [c] -> [r,c]
    BroadcastRows(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    Concat1(Vec<usize>),
    Slice1(usize, usize),
    Reshape(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalarVar(..) => "mul_scalar_var",
            Op::Relu(..) => "relu",
            Op::Step(..) => "step",
            Op::Sigmoid(..) => "sigmoid",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::SumAll(..) => "sum_all",
            Op::Dot(..) => "dot",
            Op::BroadcastScalar(..) => "broadcast_scalar",
            Op::SumRows(..) => "sum_rows",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::Concat1(..) => "concat1",
            Op::Slice1(..) => "slice1",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Wengert tape: an append-only record of primitive operations with eagerly
/// evaluated values. Single-writer; create one per optimization step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// When false, skip the per-op finiteness scan (the scan is cheap but
    /// not free on hot training loops; errors still surface via loss checks).
    check_finite: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), check_finite: true }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Trainable leaf: gradients flow to it.
    pub fn var(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value: t, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable leaf (inputs, targets, fixed weights).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value: t, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Result<Var, TensorError> {
        if self.check_finite && !value.is_finite() {
            return Err(TensorError::NonFinite { node: self.nodes.len(), op: op.name() });
        }
        self.nodes.push(Node { op, value, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape_err(op: &'static str, detail: String) -> TensorError {
        TensorError::Shape { op, detail }
    }

    // ── primitives ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = matmul_data(self.value(a), self.value(b))?;
        self.push(Op::Matmul(a.0, b.0), v, self.ng(a) || self.ng(b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Self::shape_err("transpose", format!("{:?}", t.shape())));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        let v = Tensor::new(vec![c, r], out)?;
        self.push(Op::Transpose(x.0), v, self.ng(x))
    }

    fn zip(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err(
                match op {
                    Op::Add(..) => "add",
                    Op::Sub(..) => "sub",
                    _ => "mul",
                },
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let v = Tensor { shape: ta.shape().to_vec(), data };
        self.push(op, v, self.ng(a) || self.ng(b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip(Op::Add(a.0, b.0), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip(Op::Sub(a.0, b.0), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip(Op::Mul(a.0, b.0), a, b, |x, y| x * y)
    }

    /// `[r,c] + [c]` with the vector added to every row.
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var, TensorError> {
        let (tm, tv) = (self.value(m), self.value(v));
        if tm.rank() != 2 || tv.rank() != 1 || tm.shape()[1] != tv.shape()[0] {
            return Err(Self::shape_err("add_row", format!("{:?} + {:?}", tm.shape(), tv.shape())));
        }
        let c = tm.shape()[1];
        let mut data = tm.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, &b) in row.iter_mut().zip(tv.data()) {
                *x += b;
            }
        }
        let val = Tensor { shape: tm.shape().to_vec(), data };
        self.push(Op::AddRow(m.0, v.0), val, self.ng(m) || self.ng(v))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let v = self.value(x).map(|v| v * c);
        self.push(Op::Scale(x.0, c), v, self.ng(x))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let v = self.value(x).map(|v| v + c);
        self.push(Op::AddScalar(x.0, c), v, self.ng(x))
    }

    /// Elementwise product of a tensor with a scalar *node*.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(Self::shape_err("mul_scalar_var", format!("scalar has shape {:?}", sv.shape())));
        }
        let c = sv.data()[0];
        let v = self.value(x).map(|v| v * c);
        self.push(Op::MulScalarVar(x.0, s.0), v, self.ng(x) || self.ng(s))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu(x.0), v, self.ng(x))
    }

    /// Indicator of positivity; derivative is identically zero.
    pub fn step(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        self.push(Op::Step(x.0), v, self.ng(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(Op::Sigmoid(x.0), v, self.ng(x))
    }

    pub fn sin(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x).map(f64::sin);
        self.push(Op::Sin(x.0), v, self.ng(x))
    }

    pub fn cos(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x).map(f64::cos);
        self.push(Op::Cos(x.0), v, self.ng(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, TensorError> {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Op::SumAll(x.0), Tensor::scalar(s), self.ng(x))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err("dot", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).sum();
        self.push(Op::Dot(a.0, b.0), Tensor::scalar(s), self.ng(a) || self.ng(b))
    }

    pub fn broadcast_scalar(&mut self, s: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(Self::shape_err("broadcast_scalar", format!("{:?}", sv.shape())));
        }
        let v = Tensor::filled(shape, sv.data()[0]);
        self.push(Op::BroadcastScalar(s.0), v, self.ng(s))
    }

    pub fn sum_rows(&mut self, m: Var) -> Result<Var, TensorError> {
        let t = self.value(m);
        if t.rank() != 2 {
            return Err(Self::shape_err("sum_rows", format!("{:?}", t.shape())));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += t.data()[i * c + j];
            }
        }
        self.push(Op::SumRows(m.0), Tensor::vector(out), self.ng(m))
    }

    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var, TensorError> {
        let t = self.value(v);
        if t.rank() != 1 {
            return Err(Self::shape_err("broadcast_rows", format!("{:?}", t.shape())));
        }
        let c = t.shape()[0];
        let mut out = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            out.extend_from_slice(t.data());
        }
        let val = Tensor::new(vec![rows, c], out)?;
        self.push(Op::BroadcastRows(v.0), val, self.ng(v))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::Invalid("concat_cols of zero tensors".into()));
        }
        let r = self.value(xs[0]).shape()[0];
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let t = self.value(x);
            if t.rank() != 2 || t.shape()[0] != r {
                return Err(Self::shape_err("concat_cols", format!("{:?}", t.shape())));
            }
            widths.push(t.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let t = &self.nodes[x.0].value;
            for i in 0..r {
                out[i * total + off..i * total + off + w].copy_from_slice(&t.data()[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let needs = xs.iter().any(|&x| self.ng(x));
        let val = Tensor::new(vec![r, total], out)?;
        self.push(Op::ConcatCols(xs.iter().map(|v| v.0).collect()), val, needs)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.rank() != 2 || start + len > t.shape()[1] {
            return Err(Self::shape_err("slice_cols", format!("{:?} [{start}..{}]", t.shape(), start + len)));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
        }
        let val = Tensor::new(vec![r, len], out)?;
        self.push(Op::SliceCols(x.0, start), val, self.ng(x))
    }

    pub fn concat1(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::Invalid("concat1 of zero tensors".into()));
        }
        let mut out = Vec::new();
        for &x in xs {
            let t = self.value(x);
            if t.rank() != 1 {
                return Err(Self::shape_err("concat1", format!("{:?}", t.shape())));
            }
            out.extend_from_slice(t.data());
        }
        let needs = xs.iter().any(|&x| self.ng(x));
        self.push(Op::Concat1(xs.iter().map(|v| v.0).collect()), Tensor::vector(out), needs)
    }

    pub fn slice1(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.rank() != 1 || start + len > t.shape()[0] {
            return Err(Self::shape_err("slice1", format!("{:?} [{start}..{}]", t.shape(), start + len)));
        }
        let val = Tensor::vector(t.data()[start..start + len].to_vec());
        self.push(Op::Slice1(x.0, start), val, self.ng(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Self::shape_err("reshape", format!("{:?} -> {:?}", t.shape(), shape)));
        }
        let val = Tensor { shape: shape.to_vec(), data: t.data().to_vec() };
        self.push(Op::Reshape(x.0), val, self.ng(x))
    }

    // ── composites ──────────────────────────────────────────────────

    /// x * sigmoid(x)
    pub fn silu(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.sigmoid(x)?;
        self.mul(x, s)
    }

    /// Sum of squared entries -> scalar.
    pub fn sum_sq(&mut self, x: Var) -> Result<Var, TensorError> {
        self.dot(x, x)
    }

    /// Mean of all entries -> scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(TensorError::Invalid("mean of empty tensor".into()));
        }
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean squared difference between two same-shape tensors -> scalar.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        let d = self.sub(pred, target)?;
        let n = self.value(d).numel();
        let ss = self.sum_sq(d)?;
        self.scale(ss, 1.0 / n as f64)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse pass emitting gradient *nodes*, one per entry of `wrt`.
    /// The returned vars are differentiable, enabling higher-order use.
    pub fn grad_vars(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>, TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss { shape: self.value(loss).shape().to_vec() });
        }
        let top = loss.0;
        let mut adjoint: Vec<Option<Var>> = vec![None; top + 1];
        let seed_shape = self.value(loss).shape().to_vec();
        let one = self.constant(Tensor { shape: seed_shape, data: vec![1.0] });
        adjoint[top] = Some(one);

        // Node ids are creation-ordered, so descending order is reverse
        // topological for the DAG rooted at `loss`.
        for id in (0..=top).rev() {
            let g = match adjoint[id] {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].needs_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    if self.nodes[a].needs_grad {
                        let bt = self.transpose(Var(b))?;
                        let da = self.matmul(g, bt)?;
                        self.accumulate(&mut adjoint, a, da)?;
                    }
                    if self.nodes[b].needs_grad {
                        let at = self.transpose(Var(a))?;
                        let db = self.matmul(at, g)?;
                        self.accumulate(&mut adjoint, b, db)?;
                    }
                }
                Op::Transpose(x) => {
                    let dx = self.transpose(g)?;
                    self.accumulate(&mut adjoint, x, dx)?;
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut adjoint, a, g)?;
                    self.accumulate(&mut adjoint, b, g)?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adjoint, a, g)?;
                    if self.nodes[b].needs_grad {
                        let n = self.scale(g, -1.0)?;
                        self.accumulate(&mut adjoint, b, n)?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.nodes[a].needs_grad {
                        let da = self.mul(g, Var(b))?;
                        self.accumulate(&mut adjoint, a, da)?;
                    }
                    if self.nodes[b].needs_grad {
                        let db = self.mul(g, Var(a))?;
                        self.accumulate(&mut adjoint, b, db)?;
                    }
                }
                Op::AddRow(m, v) => {
                    self.accumulate(&mut adjoint, m, g)?;
                    if self.nodes[v].needs_grad {
                        let dv = self.sum_rows(g)?;
                        self.accumulate(&mut adjoint, v, dv)?;
                    }
                }
                Op::Scale(x, c) => {
                    let dx = self.scale(g, c)?;
                    self.accumulate(&mut adjoint, x, dx)?;
                }
                Op::AddScalar(x, _) => {
                    self.accumulate(&mut adjoint, x, g)?;
                }
                Op::MulScalarVar(x, s) => {
                    if self.nodes[x].needs_grad {
                        let dx = self.mul_scalar_var(g, Var(s))?;
                        self.accumulate(&mut adjoint, x, dx)?;
                    }
                    if self.nodes[s].needs_grad {
                        let ds = self.dot(g, Var(x))?;
                        self.accumulate(&mut adjoint, s, ds)?;
                    }
                }
                Op::Relu(x) => {
                    let mask = self.step(Var(x))?;
                    let dx = self.mul(g, mask)?;
                    self.accumulate(&mut adjoint, x, dx)?;
                }
                // d step = 0 everywhere it exists; drop the path.
                Op::Step(_) => {}
                Op::Sigmoid(x) => {
                    let y = Var(id);
                    let neg = self.scale(y, -1.0)?;
                    let one_minus = self.add_scalar(neg, 1.0)?;
                    let yy = self.mul(y, one_minus)?;
                    let dx = self.mul(g, yy)?;
                    self.accumulate(&mut adjoint, x, dx)?;
                }
                Op::Sin(x) => {
                    let c = self.cos(Var(x))?;
                    let dx = self.mul(g, c)?;
                    self.accumulate(&mut adjoint, x, dx)?;
                }
                Op::Cos(x) => {
                    let s = self.sin(Var(x))?;
                    let ns = self.scale(s, -1.0)?;
                    let dx = self.mul(g, ns)?;
                    self.accumulate(&mut adjoint, x, dx)?;
                }
                Op::SumAll(x) => {
                    let shape = self.nodes[x].value.shape().to_vec();
                    let dx = self.broadcast_scalar(g, &shape)?;
                    self.accumulate(&mut adjoint, x, dx)?;
                }
                Op::Dot(a, b) => {
                    if self.nodes[a].needs_grad {
                        let da = self.mul_scalar_var(Var(b), g)?;
                        self.accumulate(&mut adjoint, a, da)?;
                    }
                    if self.nodes[b].needs_grad {
                        let db = self.mul_scalar_var(Var(a), g)?;
                        self.accumulate(&mut adjoint, b, db)?;
                    }
                }
                Op::BroadcastScalar(s) => {
                    let ds = self.sum_all(g)?;
                    self.accumulate(&mut adjoint, s, ds)?;
                }
                Op::SumRows(m) => {
                    let rows = self.nodes[m].value.shape()[0];
                    let dm = self.broadcast_rows(g, rows)?;
                    self.accumulate(&mut adjoint, m, dm)?;
                }
                Op::BroadcastRows(v) => {
                    let dv = self.sum_rows(g)?;
                    self.accumulate(&mut adjoint, v, dv)?;
                }
                Op::ConcatCols(xs) => {
                    let mut off = 0;
                    for x in xs {
                        let w = self.nodes[x].value.shape()[1];
                        if self.nodes[x].needs_grad {
                            let dx = self.slice_cols(g, off, w)?;
                            self.accumulate(&mut adjoint, x, dx)?;
                        }
                        off += w;
                    }
                }
                Op::SliceCols(x, start) => {
                    let (r, c) = (self.nodes[x].value.shape()[0], self.nodes[x].value.shape()[1]);
                    let w = self.value(g).shape()[1];
                    let mut parts = Vec::new();
                    if start > 0 {
                        parts.push(self.constant(Tensor::zeros(&[r, start])));
                    }
                    parts.push(g);
                    if start + w < c {
                        parts.push(self.constant(Tensor::zeros(&[r, c - start - w])));
                    }
                    let dx = self.concat_cols(&parts)?;
                    self.accumulate(&mut adjoint, x, dx)?;
                }
                Op::Concat1(xs) => {
                    let mut off = 0;
                    for x in xs {
                        let w = self.nodes[x].value.shape()[0];
                        if self.nodes[x].needs_grad {
                            let dx = self.slice1(g, off, w)?;
                            self.accumulate(&mut adjoint, x, dx)?;
                        }
                        off += w;
                    }
                }
                Op::Slice1(x, start) => {
                    let c = self.nodes[x].value.shape()[0];
                    let w = self.value(g).shape()[0];
                    let mut parts = Vec::new();
                    if start > 0 {
                        parts.push(self.constant(Tensor::zeros(&[start])));
                    }
                    parts.push(g);
                    if start + w < c {
                        parts.push(self.constant(Tensor::zeros(&[c - start - w])));
                    }
                    let dx = self.concat1(&parts)?;
                    self.accumulate(&mut adjoint, x, dx)?;
                }
                Op::Reshape(x) => {
                    let shape = self.nodes[x].value.shape().to_vec();
                    let dx = self.reshape(g, &shape)?;
                    self.accumulate(&mut adjoint, x, dx)?;
                }
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            match adjoint.get(w.0).copied().flatten() {
                Some(g) => {
                    // Adjoint of a reshaped/scalar leaf always matches the
                    // leaf shape by construction of the VJPs above.
                    out.push(g);
                }
                None => {
                    let z = Tensor::zeros(self.value(w).shape());
                    out.push(self.constant(z));
                }
            }
        }
        Ok(out)
    }

    fn accumulate(
        &mut self,
        adjoint: &mut [Option<Var>],
        target: usize,
        contrib: Var,
    ) -> Result<(), TensorError> {
        if !self.nodes[target].needs_grad {
            return Ok(());
        }
        adjoint[target] = Some(match adjoint[target] {
            Some(prev) => self.add(prev, contrib)?,
            None => contrib,
        });
        Ok(())
    }

    /// Reverse pass returning plain tensors; the nodes emitted while
    /// computing them are discarded, so the tape does not grow.
    pub fn grad(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>, TensorError> {
        let mark = self.nodes.len();
        let vars = self.grad_vars(loss, wrt)?;
        let out = vars.iter().map(|&v| self.value(v).clone()).collect();
        self.nodes.truncate(mark);
        Ok(out)
    }

    /// Recompute every non-leaf node from the recorded ops and verify the
    /// stored values are reproduced bit-for-bit.
    pub fn replay_matches(&self) -> bool {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                _ => self.recompute(&node.op, &values, node.value.shape()),
            };
            if v.shape() != node.value.shape() || v.data() != node.value.data() {
                return false;
            }
            values.push(v);
        }
        true
    }

    fn recompute(&self, op: &Op, values: &[Tensor], out_shape: &[usize]) -> Tensor {
        let v = |i: usize| &values[i];
        match op {
            Op::Leaf => unreachable!(),
            Op::Matmul(a, b) => matmul_data(v(*a), v(*b)).expect("recorded op must replay"),
            Op::Transpose(x) => {
                let t = v(*x);
                let (r, c) = (t.shape()[0], t.shape()[1]);
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = t.data()[i * c + j];
                    }
                }
                Tensor::new(vec![c, r], out).unwrap()
            }
            Op::Add(a, b) => zip_data(v(*a), v(*b), |x, y| x + y),
            Op::Sub(a, b) => zip_data(v(*a), v(*b), |x, y| x - y),
            Op::Mul(a, b) => zip_data(v(*a), v(*b), |x, y| x * y),
            Op::AddRow(m, r) => {
                let (tm, tv) = (v(*m), v(*r));
                let c = tm.shape()[1];
                let mut data = tm.data().to_vec();
                for row in data.chunks_mut(c) {
                    for (x, &b) in row.iter_mut().zip(tv.data()) {
                        *x += b;
                    }
                }
                Tensor { shape: tm.shape().to_vec(), data }
            }
            Op::Scale(x, c) => v(*x).map(|a| a * c),
            Op::AddScalar(x, c) => v(*x).map(|a| a + c),
            Op::MulScalarVar(x, s) => {
                let c = v(*s).data()[0];
                v(*x).map(|a| a * c)
            }
            Op::Relu(x) => v(*x).map(|a| if a > 0.0 { a } else { 0.0 }),
            Op::Step(x) => v(*x).map(|a| if a > 0.0 { 1.0 } else { 0.0 }),
            Op::Sigmoid(x) => v(*x).map(|a| 1.0 / (1.0 + (-a).exp())),
            Op::Sin(x) => v(*x).map(f64::sin),
            Op::Cos(x) => v(*x).map(f64::cos),
            Op::SumAll(x) => Tensor::scalar(v(*x).data().iter().sum()),
            Op::Dot(a, b) => {
                Tensor::scalar(v(*a).data().iter().zip(v(*b).data()).map(|(&x, &y)| x * y).sum())
            }
            Op::BroadcastScalar(s) => Tensor::filled(out_shape, v(*s).data()[0]),
            Op::SumRows(m) => {
                let t = v(*m);
                let (r, c) = (t.shape()[0], t.shape()[1]);
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        out[j] += t.data()[i * c + j];
                    }
                }
                Tensor::vector(out)
            }
            Op::BroadcastRows(x) => {
                let t = v(*x);
                let rows = out_shape[0];
                let mut out = Vec::with_capacity(rows * t.numel());
                for _ in 0..rows {
                    out.extend_from_slice(t.data());
                }
                Tensor::new(out_shape.to_vec(), out).unwrap()
            }
            Op::ConcatCols(xs) => {
                let r = v(xs[0]).shape()[0];
                let total: usize = xs.iter().map(|&x| v(x).shape()[1]).sum();
                let mut out = vec![0.0; r * total];
                let mut off = 0;
                for &x in xs {
                    let t = v(x);
                    let w = t.shape()[1];
                    for i in 0..r {
                        out[i * total + off..i * total + off + w]
                            .copy_from_slice(&t.data()[i * w..(i + 1) * w]);
                    }
                    off += w;
                }
                Tensor::new(vec![r, total], out).unwrap()
            }
            Op::SliceCols(x, start) => {
                let t = v(*x);
                let (r, c) = (t.shape()[0], t.shape()[1]);
                let len = out_shape[1];
                let mut out = Vec::with_capacity(r * len);
                for i in 0..r {
                    out.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
                }
                Tensor::new(vec![r, len], out).unwrap()
            }
            Op::Concat1(xs) => {
                let mut out = Vec::new();
                for &x in xs {
                    out.extend_from_slice(v(x).data());
                }
                Tensor::vector(out)
            }
            Op::Slice1(x, start) => {
                Tensor::vector(v(*x).data()[*start..start + out_shape[0]].to_vec())
            }
            Op::Reshape(x) => Tensor { shape: out_shape.to_vec(), data: v(*x).data().to_vec() },
        }
    }
}

fn zip_data(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape().to_vec(),
        data: a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    }
}

/// Evaluate a scalar function of the given parameters and return its value
/// together with the gradient for each parameter.
pub fn value_and_grad<F>(f: F, params: &[Tensor]) -> Result<(f64, Vec<Tensor>), TensorError>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    if params.is_empty() {
        return Err(TensorError::Invalid("value_and_grad with no parameters".into()));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.var(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss).item();
    let grads = tape.grad(loss, &vars)?;
    Ok((value, grads))
}

/// Configuration for differentiating through an unrolled inner loop of
/// plain gradient-descent steps on a context vector.
#[derive(Debug, Clone, Copy)]
pub struct InnerLoopCfg {
    pub steps: usize,
    pub lr: f64,
    /// Treat the adapted context as a constant in the outer gradient.
    pub first_order: bool,
}

/// Outcome of [`grad_through_inner_loop`].
pub struct InnerLoopResult {
    /// Loss after the K-th inner update.
    pub loss: f64,
    /// Gradients of that loss with respect to the global parameters.
    pub global_grads: Vec<Tensor>,
    /// The adapted context vector.
    pub adapted: Tensor,
    /// Loss at the initial context, before any inner update.
    pub initial_loss: f64,
}

/// Gradients of a post-inner-loop loss with respect to global parameters.
///
/// The inner loop takes `cfg.steps` plain gradient-descent steps on the
/// context only. In second-order mode (default) the outer gradients are
/// exact: they are obtained by differentiating through every unrolled
/// update, whose gradient computations live on the same tape.
/// With `steps == 0` this degenerates to [`value_and_grad`].
pub fn grad_through_inner_loop<F>(
    loss_fn: F,
    globals: &[Tensor],
    init_context: &Tensor,
    cfg: &InnerLoopCfg,
) -> Result<InnerLoopResult, TensorError>
where
    F: Fn(&mut Tape, &[Var], Var) -> Result<Var, TensorError>,
{
    if cfg.first_order {
        // Inner steps on throwaway tapes with frozen globals.
        let mut z = init_context.clone();
        let mut initial_loss = None;
        for _ in 0..cfg.steps {
            let mut tape = Tape::new();
            let gvars: Vec<Var> = globals.iter().map(|g| tape.constant(g.clone())).collect();
            let zv = tape.var(z.clone());
            let loss = loss_fn(&mut tape, &gvars, zv)?;
            initial_loss.get_or_insert_with(|| tape.value(loss).item());
            let gz = tape.grad(loss, &[zv])?.remove(0);
            for (zi, gi) in z.data_mut().iter_mut().zip(gz.data()) {
                *zi -= cfg.lr * gi;
            }
        }
        let mut tape = Tape::new();
        let gvars: Vec<Var> = globals.iter().map(|g| tape.var(g.clone())).collect();
        let zv = tape.constant(z.clone());
        let loss = loss_fn(&mut tape, &gvars, zv)?;
        let value = tape.value(loss).item();
        let grads = tape.grad(loss, &gvars)?;
        return Ok(InnerLoopResult {
            loss: value,
            global_grads: grads,
            adapted: z,
            initial_loss: initial_loss.unwrap_or(value),
        });
    }

    let mut tape = Tape::new();
    let gvars: Vec<Var> = globals.iter().map(|g| tape.var(g.clone())).collect();
    let mut z = tape.var(init_context.clone());
    let mut initial_loss = None;
    for _ in 0..cfg.steps {
        let loss = loss_fn(&mut tape, &gvars, z)?;
        initial_loss.get_or_insert_with(|| tape.value(loss).item());
        let gz = tape.grad_vars(loss, &[z])?[0];
        let step = tape.scale(gz, cfg.lr)?;
        z = tape.sub(z, step)?;
    }
    let loss = loss_fn(&mut tape, &gvars, z)?;
    let value = tape.value(loss).item();
    let grads = tape.grad(loss, &gvars)?;
    Ok(InnerLoopResult {
        loss: value,
        global_grads: grads,
        adapted: tape.value(z).clone(),
        initial_loss: initial_loss.unwrap_or(value),
    })
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck;
    use super::*;

    #[test]
    fn sum_of_squares_grad() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let (v, g) = value_and_grad(|t, p| t.sum_sq(p[0]), &[x]).unwrap();
        assert_eq!(v, 14.0);
        assert_eq!(g[0].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let x = Tensor::vector(vec![-1.0, 0.0, 2.0]);
        let (v, g) = value_and_grad(
            |t, p| {
                let r = t.relu(p[0])?;
                t.sum_all(r)
            },
            &[x],
        )
        .unwrap();
        assert_eq!(v, 2.0);
        assert_eq!(g[0].data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_grads_match_finite_differences() {
        let a = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64) * 0.3 - 1.7).collect()).unwrap();
        let b = Tensor::matrix(4, 2, (0..8).map(|i| (i as f64) * -0.21 + 0.9).collect()).unwrap();
        let f = |t: &mut Tape, p: &[Var]| {
            let c = t.matmul(p[0], p[1])?;
            let s = t.sin(c)?;
            t.sum_sq(s)
        };
        let max = gradcheck::max_rel_err(f, &[a, b], 1e-5).unwrap();
        assert!(max < 1e-7, "max rel err {max}");
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        // One scalar loss exercising all differentiable primitives.
        let f = |t: &mut Tape, p: &[Var]| {
            let m = p[0]; // [3,4]
            let v = p[1]; // [4]
            let s = p[2]; // scalar
            let w = p[3]; // [4,3]
            let a = t.add_row(m, v)?;
            let b = t.matmul(a, w)?; // [3,3]
            let bt = t.transpose(b)?;
            let c = t.add(b, bt)?;
            let d = t.sub(c, bt)?;
            let e = t.mul(d, c)?;
            let r = t.relu(e)?;
            let si = t.silu(r)?;
            let sn = t.sin(si)?;
            let cs = t.cos(si)?;
            let both = t.concat_cols(&[sn, cs])?; // [3,6]
            let left = t.slice_cols(both, 1, 4)?;
            let flat = t.reshape(left, &[12])?;
            let parts = t.slice1(flat, 2, 6)?;
            let joined = t.concat1(&[parts, flat])?;
            let scaled = t.mul_scalar_var(joined, s)?;
            let shifted = t.add_scalar(scaled, 0.25)?;
            let back = t.reshape(shifted, &[2, 9])?;
            let colsum = t.sum_rows(back)?;
            let wide = t.broadcast_rows(colsum, 3)?;
            let total = t.sum_all(wide)?;
            let sq = t.sum_sq(back)?;
            let mn = t.mean(back)?;
            let sig = t.sigmoid(mn)?;
            let bs = t.broadcast_scalar(sig, &[2])?;
            let extra = t.sum_all(bs)?;
            let acc = t.add(total, sq)?;
            let acc = t.add(acc, extra)?;
            let g = t.scale(acc, 0.5)?;
            t.add(g, mn)
        };
        let params = vec![
            Tensor::matrix(3, 4, (0..12).map(|i| ((i * 7 % 11) as f64) * 0.21 - 1.0).collect()).unwrap(),
            Tensor::vector(vec![0.3, -0.6, 1.2, 0.05]),
            Tensor::scalar(0.8),
            Tensor::matrix(4, 3, (0..12).map(|i| ((i * 5 % 13) as f64) * 0.17 - 0.9).collect()).unwrap(),
        ];
        let max = gradcheck::max_rel_err(f, &params, 1e-5).unwrap();
        assert!(max < 1e-6, "max rel err {max}");
    }

    #[test]
    fn second_order_through_one_quadratic_step() {
        // L(z; a) = a * z^2. One inner step: z1 = z0 - lr * 2 a z0.
        // Outer loss L(z1; a) = a z1^2, dL/da has a hand-derived closed form.
        let a0 = 1.3;
        let z0 = 0.7;
        let lr = 0.1;
        let f = |t: &mut Tape, g: &[Var], z: Var| {
            let zz = t.mul(z, z)?;
            let prod = t.mul(g[0], zz)?;
            t.sum_all(prod)
        };
        let r = grad_through_inner_loop(
            f,
            &[Tensor::scalar(a0)],
            &Tensor::scalar(z0),
            &InnerLoopCfg { steps: 1, lr, first_order: false },
        )
        .unwrap();
        // z1 = z0 (1 - 2 lr a); L = a z0^2 (1 - 2 lr a)^2
        // dL/da = z0^2 (1 - 2 lr a)^2 + a z0^2 * 2 (1 - 2 lr a)(-2 lr)
        let u = 1.0 - 2.0 * lr * a0;
        let expected = z0 * z0 * u * u + a0 * z0 * z0 * 2.0 * u * (-2.0 * lr);
        assert!((r.global_grads[0].item() - expected).abs() < 1e-12);
        assert!((r.adapted.item() - z0 * u).abs() < 1e-15);

        // First-order mode treats z1 as constant: dL/da = z1^2 only.
        let rf = grad_through_inner_loop(
            f,
            &[Tensor::scalar(a0)],
            &Tensor::scalar(z0),
            &InnerLoopCfg { steps: 1, lr, first_order: true },
        )
        .unwrap();
        let z1 = z0 * u;
        assert!((rf.global_grads[0].item() - z1 * z1).abs() < 1e-12);
    }

    #[test]
    fn zero_inner_steps_equals_value_and_grad() {
        let w = Tensor::vector(vec![0.4, -1.1]);
        let f = |t: &mut Tape, g: &[Var], z: Var| {
            let d = t.sub(g[0], z)?;
            t.sum_sq(d)
        };
        let r = grad_through_inner_loop(
            f,
            &[w.clone()],
            &Tensor::vector(vec![0.0, 0.0]),
            &InnerLoopCfg { steps: 0, lr: 0.1, first_order: false },
        )
        .unwrap();
        let (v, g) = value_and_grad(
            |t, p| {
                let z = t.constant(Tensor::vector(vec![0.0, 0.0]));
                let d = t.sub(p[0], z)?;
                t.sum_sq(d)
            },
            &[w],
        )
        .unwrap();
        assert_eq!(r.loss.to_bits(), v.to_bits());
        assert_eq!(r.global_grads[0].data(), g[0].data());
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![0.3, -0.9, 2.4]));
        let s = tape.sin(x).unwrap();
        let q = tape.sum_sq(s).unwrap();
        let _ = tape.grad_vars(q, &[x]).unwrap();
        assert!(tape.replay_matches());
    }

    #[test]
    fn non_finite_intermediate_is_reported() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::scalar(1e308));
        let y = tape.add(x, x);
        match y {
            Err(TensorError::NonFinite { op, .. }) => assert_eq!(op, "add"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn grad_does_not_grow_tape() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![1.0, 2.0]));
        let l = tape.sum_sq(x).unwrap();
        let before = tape.len();
        let _ = tape.grad(l, &[x]).unwrap();
        assert_eq!(tape.len(), before);
    }
}
