use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels;
use super::{AutodiffError, Tensor};

/// Epsilon added under the square root of every row norm.
pub const NORM_EPS: f64 = 1e-8;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add { broadcast: bool },
    Sub,
    Mul,
    Scale(f64),
    MatMul,
    Transpose,
    Relu,
    L2Normalize,
    Cosine,
    ReduceMean,
    SumLast,
    Concat { left_cols: usize },
    Log,
    Exp,
    GatherRows(Vec<usize>),
    StopGradient,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add { .. } => "add",
            Op::Sub => "subtract",
            Op::Mul => "multiply",
            Op::Scale(_) => "scale",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Relu => "relu",
            Op::L2Normalize => "l2_normalize",
            Op::Cosine => "cosine_similarity",
            Op::ReduceMean => "reduce_mean",
            Op::SumLast => "sum_last",
            Op::Concat { .. } => "concat",
            Op::Log => "log",
            Op::Exp => "exp",
            Op::GatherRows(_) => "gather_rows",
            Op::StopGradient => "stop_gradient",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: [usize; 2],
    arity: u8,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of operations for reverse-mode differentiation.
///
/// Nodes are stored in creation order, so every node's inputs precede it and
/// a single reverse sweep visits the graph in topological order.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enables or disables the non-finite check on every forward op.
    pub fn set_finite_checks(&mut self, enabled: bool) {
        self.check_finite = enabled;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.index].value
    }

    pub fn contains(&self, v: Var) -> bool {
        v.tape == self.id && v.index < self.nodes.len()
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_unchecked(Op::Leaf, [0, 0], 0, value, true)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(Op::Constant, [0, 0], 0, value, false)
    }

    fn push_unchecked(
        &mut self,
        op: Op,
        inputs: [usize; 2],
        arity: u8,
        value: Tensor,
        requires_grad: bool,
    ) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            op,
            inputs,
            arity,
            value,
            requires_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn push(&mut self, op: Op, inputs: &[Var], value: Tensor) -> Result<Var, AutodiffError> {
        if self.check_finite && !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        let requires_grad = !matches!(op, Op::StopGradient)
            && inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        let mut idx = [0usize; 2];
        for (slot, v) in idx.iter_mut().zip(inputs) {
            *slot = v.index;
        }
        Ok(self.push_unchecked(op, idx, inputs.len() as u8, value, requires_grad))
    }

    fn check(&self, v: Var) -> Result<&Tensor, AutodiffError> {
        if !self.contains(v) {
            return Err(AutodiffError::ForeignVar);
        }
        Ok(&self.nodes[v.index].value)
    }

    fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        }
    }

    /// Elementwise sum. `b` may also be a vector matching the last axis of a
    /// matrix `a`, in which case it is added to every row.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        let broadcast = if ta.shape() == tb.shape() {
            false
        } else if tb.shape().len() == 1 && ta.shape().len() >= 2 && tb.len() == ta.last_dim() {
            true
        } else {
            return Err(Self::shape_err("add", ta, tb));
        };
        let mut out = ta.data().to_vec();
        if broadcast {
            let n = tb.len();
            for row in out.chunks_mut(n) {
                for (o, x) in row.iter_mut().zip(tb.data()) {
                    *o += x;
                }
            }
        } else {
            for (o, x) in out.iter_mut().zip(tb.data()) {
                *o += x;
            }
        }
        let value = Tensor::from_parts(ta.shape().to_vec(), out);
        self.push(Op::Add { broadcast }, &[a, b], value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let value = self.zip_same("subtract", a, b, |x, y| x - y)?;
        self.push(Op::Sub, &[a, b], value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let value = self.zip_same("multiply", a, b, |x, y| x * y)?;
        self.push(Op::Mul, &[a, b], value)
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, AutodiffError> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err(op, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Result<Tensor, AutodiffError> {
        let ta = self.check(a)?;
        let data = ta.data().iter().map(|&x| f(x)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, AutodiffError> {
        let value = self.map(a, |x| x * factor)?;
        self.push(Op::Scale(factor), &[a], value)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let value = self.map(a, |x| if x > 0.0 { x } else { 0.0 })?;
        self.push(Op::Relu, &[a], value)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let value = self.map(a, f64::ln)?;
        self.push(Op::Log, &[a], value)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let value = self.map(a, f64::exp)?;
        self.push(Op::Exp, &[a], value)
    }

    /// Identity in the forward pass; blocks every gradient in the backward pass.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let value = self.check(a)?.clone();
        self.push(Op::StopGradient, &[a], value)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Self::shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        self.push(Op::MatMul, &[a, b], Tensor::from_parts(vec![m, n], out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ta = self.check(a)?;
        if ta.shape().len() != 2 {
            return Err(AutodiffError::RankMismatch {
                op: "transpose",
                expected: 2,
                shape: ta.shape().to_vec(),
            });
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let value = Tensor::from_parts(vec![n, m], kernels::transpose(ta.data(), m, n));
        self.push(Op::Transpose, &[a], value)
    }

    /// Divides every row (last axis) by `sqrt(sum(x^2) + 1e-8)`.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ta = self.check(a)?;
        let n = ta.last_dim();
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(n) {
            let norm = row_norm(row);
            row.iter_mut().for_each(|x| *x /= norm);
        }
        let value = Tensor::from_parts(ta.shape().to_vec(), out);
        self.push(Op::L2Normalize, &[a], value)
    }

    /// Row-wise cosine similarity of two equally shaped tensors; one value per
    /// row. Values are clamped to `[-1, 1]` to absorb rounding.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err("cosine_similarity", ta, tb));
        }
        let rows = ta.rows();
        let out: Vec<f64> = (0..rows)
            .map(|i| {
                let (x, y) = (ta.row(i), tb.row(i));
                (dot(x, y) / (row_norm(x) * row_norm(y))).clamp(-1.0, 1.0)
            })
            .collect();
        self.push(Op::Cosine, &[a, b], Tensor::from_parts(vec![rows], out))
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn reduce_mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ta = self.check(a)?;
        let mean = ta.data().iter().sum::<f64>() / ta.len() as f64;
        self.push(Op::ReduceMean, &[a], Tensor::scalar(mean))
    }

    /// Sums over the last axis. A vector reduces to a `[1]` tensor.
    pub fn sum_last(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ta = self.check(a)?;
        let n = ta.last_dim();
        let out: Vec<f64> = ta.data().chunks(n).map(|r| r.iter().sum()).collect();
        let mut shape = ta.shape()[..ta.shape().len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        self.push(Op::SumLast, &[a], Tensor::from_parts(shape, out))
    }

    /// Concatenates two matrices along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[0] != tb.shape()[0] {
            return Err(Self::shape_err("concat", ta, tb));
        }
        let (rows, p, q) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = Vec::with_capacity(rows * (p + q));
        for i in 0..rows {
            out.extend_from_slice(ta.row(i));
            out.extend_from_slice(tb.row(i));
        }
        let value = Tensor::from_parts(vec![rows, p + q], out);
        self.push(Op::Concat { left_cols: p }, &[a, b], value)
    }

    /// Selects rows of a matrix by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, AutodiffError> {
        let ta = self.check(a)?;
        if ta.shape().len() != 2 {
            return Err(AutodiffError::RankMismatch {
                op: "gather_rows",
                expected: 2,
                shape: ta.shape().to_vec(),
            });
        }
        let rows = ta.shape()[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(AutodiffError::IndexOutOfRange { index: bad, rows });
        }
        if indices.is_empty() {
            return Err(AutodiffError::InvalidShape {
                shape: vec![0, ta.shape()[1]],
            });
        }
        let mut out = Vec::with_capacity(indices.len() * ta.shape()[1]);
        for &i in indices {
            out.extend_from_slice(ta.row(i));
        }
        let value = Tensor::from_parts(vec![indices.len(), ta.shape()[1]], out);
        self.push(Op::GatherRows(indices.to_vec()), &[a], value)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<GradientMap, AutodiffError> {
        if !self.contains(root) {
            return Err(AutodiffError::ForeignVar);
        }
        let root_value = &self.nodes[root.index].value;
        if !root_value.is_scalar() {
            return Err(AutodiffError::NotScalar {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.index + 1];
        grads[root.index] = Some(Tensor::full(root_value.shape(), 1.0));

        for i in (0..=root.index).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || node.arity == 0 {
                continue;
            }
            let (before, after) = grads.split_at_mut(i);
            let Some(g) = after[0].as_ref() else {
                continue;
            };
            self.propagate(node, g, before);
        }
        Ok(GradientMap {
            tape: self.id,
            grads,
        })
    }

    fn input(&self, node: &Node, k: usize) -> &Node {
        &self.nodes[node.inputs[k]]
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let wants = |k: usize| self.input(node, k).requires_grad;
        let ia = node.inputs[0];
        let ib = node.inputs[1];
        match &node.op {
            Op::Leaf | Op::Constant | Op::StopGradient => {}
            Op::Add { broadcast } => {
                if wants(0) {
                    accumulate(grads, ia, g.data(), g.shape());
                }
                if wants(1) {
                    if *broadcast {
                        let n = self.input(node, 1).value.len();
                        let mut col = vec![0.0; n];
                        for row in g.data().chunks(n) {
                            for (c, x) in col.iter_mut().zip(row) {
                                *c += x;
                            }
                        }
                        accumulate(grads, ib, &col, &[n]);
                    } else {
                        accumulate(grads, ib, g.data(), g.shape());
                    }
                }
            }
            Op::Sub => {
                if wants(0) {
                    accumulate(grads, ia, g.data(), g.shape());
                }
                if wants(1) {
                    let neg: Vec<f64> = g.data().iter().map(|x| -x).collect();
                    accumulate(grads, ib, &neg, g.shape());
                }
            }
            Op::Mul => {
                let (a, b) = (&self.input(node, 0).value, &self.input(node, 1).value);
                if wants(0) {
                    let d: Vec<f64> = g.data().iter().zip(b.data()).map(|(g, b)| g * b).collect();
                    accumulate(grads, ia, &d, g.shape());
                }
                if wants(1) {
                    let d: Vec<f64> = g.data().iter().zip(a.data()).map(|(g, a)| g * a).collect();
                    accumulate(grads, ib, &d, g.shape());
                }
            }
            Op::Scale(c) => {
                let d: Vec<f64> = g.data().iter().map(|x| x * c).collect();
                accumulate(grads, ia, &d, g.shape());
            }
            Op::MatMul => {
                let (a, b) = (&self.input(node, 0).value, &self.input(node, 1).value);
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                if wants(0) {
                    let mut d = vec![0.0; m * k];
                    kernels::gemm_nt(g.data(), b.data(), &mut d, m, n, k);
                    accumulate(grads, ia, &d, a.shape());
                }
                if wants(1) {
                    let mut d = vec![0.0; k * n];
                    kernels::gemm_tn(a.data(), g.data(), &mut d, m, k, n);
                    accumulate(grads, ib, &d, b.shape());
                }
            }
            Op::Transpose => {
                let (m, n) = (g.shape()[0], g.shape()[1]);
                let d = kernels::transpose(g.data(), m, n);
                accumulate(grads, ia, &d, &[n, m]);
            }
            Op::Relu => {
                let a = &self.input(node, 0).value;
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(a.data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, ia, &d, g.shape());
            }
            Op::L2Normalize => {
                let y = &node.value;
                let x = &self.input(node, 0).value;
                let n = y.last_dim();
                let mut d = vec![0.0; y.len()];
                for (i, out) in d.chunks_mut(n).enumerate() {
                    let (yr, gr) = (y.row(i), &g.data()[i * n..(i + 1) * n]);
                    let norm = row_norm(x.row(i));
                    let gy = dot(gr, yr);
                    for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = (gv - yv * gy) / norm;
                    }
                }
                accumulate(grads, ia, &d, y.shape());
            }
            Op::Cosine => {
                let (a, b) = (&self.input(node, 0).value, &self.input(node, 1).value);
                let n = a.last_dim();
                let mut da = vec![0.0; a.len()];
                let mut db = vec![0.0; b.len()];
                for i in 0..a.rows() {
                    let (x, y) = (a.row(i), b.row(i));
                    let (nx, ny) = (row_norm(x), row_norm(y));
                    let c = node.value.data()[i];
                    let gi = g.data()[i];
                    for j in 0..n {
                        da[i * n + j] = gi * (y[j] / (nx * ny) - c * x[j] / (nx * nx));
                        db[i * n + j] = gi * (x[j] / (nx * ny) - c * y[j] / (ny * ny));
                    }
                }
                if wants(0) {
                    accumulate(grads, ia, &da, a.shape());
                }
                if wants(1) {
                    accumulate(grads, ib, &db, b.shape());
                }
            }
            Op::ReduceMean => {
                let a = &self.input(node, 0).value;
                let v = g.item() / a.len() as f64;
                accumulate(grads, ia, &vec![v; a.len()], a.shape());
            }
            Op::SumLast => {
                let a = &self.input(node, 0).value;
                let n = a.last_dim();
                let mut d = Vec::with_capacity(a.len());
                for gi in g.data() {
                    d.extend(std::iter::repeat_n(*gi, n));
                }
                accumulate(grads, ia, &d, a.shape());
            }
            Op::Concat { left_cols } => {
                let (rows, total) = (g.shape()[0], g.shape()[1]);
                let p = *left_cols;
                let q = total - p;
                if wants(0) {
                    let mut d = Vec::with_capacity(rows * p);
                    for r in g.data().chunks(total) {
                        d.extend_from_slice(&r[..p]);
                    }
                    accumulate(grads, ia, &d, &[rows, p]);
                }
                if wants(1) {
                    let mut d = Vec::with_capacity(rows * q);
                    for r in g.data().chunks(total) {
                        d.extend_from_slice(&r[p..]);
                    }
                    accumulate(grads, ib, &d, &[rows, q]);
                }
            }
            Op::Log => {
                let a = &self.input(node, 0).value;
                let d: Vec<f64> = g.data().iter().zip(a.data()).map(|(g, x)| g / x).collect();
                accumulate(grads, ia, &d, g.shape());
            }
            Op::Exp => {
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y)
                    .collect();
                accumulate(grads, ia, &d, g.shape());
            }
            Op::GatherRows(indices) => {
                let a = &self.input(node, 0).value;
                let n = a.shape()[1];
                let mut d = vec![0.0; a.len()];
                for (r, &src) in indices.iter().enumerate() {
                    for j in 0..n {
                        d[src * n + j] += g.data()[r * n + j];
                    }
                }
                accumulate(grads, ia, &d, a.shape());
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn row_norm(row: &[f64]) -> f64 {
    (dot(row, row) + NORM_EPS).sqrt()
}

fn accumulate(grads: &mut [Option<Tensor>], index: usize, d: &[f64], shape: &[usize]) {
    match &mut grads[index] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(d) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(Tensor::from_parts(shape.to_vec(), d.to_vec())),
    }
}

/// Gradients of one scalar root with respect to every recorded node.
#[derive(Debug, Clone)]
pub struct GradientMap {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl GradientMap {
    /// Gradient for `v`, or `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, materialising zeros of `like`'s shape when absent.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    /// True when some gradient entry for `v` is nonzero.
    pub fn is_nonzero(&self, v: Var) -> bool {
        self.get(v)
            .map(|g| g.data().iter().any(|x| *x != 0.0))
            .unwrap_or(false)
    }
}
