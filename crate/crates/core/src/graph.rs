//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every primitive application in creation order, which
//! is already a topological order. [`Graph::backward`] walks the record in
//! reverse and returns the gradient of a scalar loss with respect to every
//! node that requires one. Tensors are immutable once recorded.
//!
//! Most primitives treat their operands as matrices: the last axis is the
//! column axis and all leading axes are folded into rows. `add` and `mul`
//! accept a right operand of shape `[1, cols]`, which is broadcast over the
//! rows of the left operand. No other broadcasting is supported.
//!
//! ```
//! use ndf_rec::graph::Graph;
//! use ndf_rec::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(0.0));
//! let y = g.sigmoid(x);
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[0.25]);
//! ```

use thiserror::Error;

use crate::tensor::{ShapeError, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Softmax(Var),
    Log(Var),
    Recip(Var),
    Powf(Var, f64),
    Relu(Var),
    ClampMin(Var, f64),
    Gather(Var, Vec<usize>),
    SelectColumns(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    MaskedFill(Var, Vec<bool>),
    Reshape(Var),
    TreeRoute(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax(..) => "softmax",
            Op::Log(..) => "log",
            Op::Recip(..) => "recip",
            Op::Powf(..) => "powf",
            Op::Relu(..) => "relu",
            Op::ClampMin(..) => "clamp_min",
            Op::Gather(..) => "gather",
            Op::SelectColumns(..) => "select_columns",
            Op::Concat(..) => "concat",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::MaskedFill(..) => "masked_fill",
            Op::Reshape(..) => "reshape",
            Op::TreeRoute(..) => "tree_route",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// First recorded node whose value contains a NaN or infinity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NonFinite {
    pub node: Var,
    pub op: &'static str,
}

/// The computation record.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    non_finite: Option<NonFinite>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn row_broadcast(a: &Tensor, b: &Tensor) -> bool {
    b.rows() == 1 && b.cols() == a.cols() && b.shape().len() <= a.shape().len()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major buffers, where
/// `op` optionally transposes. `a` is logically `m x k`, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: strides describe buffers whose lengths are checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// The first node that produced a non-finite value, if any. Masked-fill
    /// outputs are exempt since their sentinel is negative infinity.
    pub fn non_finite(&self) -> Option<NonFinite> {
        self.non_finite
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let v = Var(self.nodes.len());
        if self.non_finite.is_none() && !matches!(op, Op::MaskedFill(..)) && !value.is_finite() {
            self.non_finite = Some(NonFinite {
                node: v,
                op: op.name(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        v
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies a node's value into a new constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape().len() != 2 || y.shape().len() != 2 || x.cols() != y.rows() {
            return Err(ShapeError::new("matmul", x.shape(), y.shape()));
        }
        let (m, k, n) = (x.rows(), x.cols(), y.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, x.data(), false, y.data(), false, &mut out, 0.0);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, ShapeError> {
        let x = self.value(a);
        if x.shape().len() != 2 {
            return Err(ShapeError::new("transpose", x.shape(), &[2]));
        }
        let (m, n) = (x.rows(), x.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x.data()[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, ShapeError> {
        let (x, y) = (self.value(a), self.value(b));
        let data: Vec<f64> = if x.shape() == y.shape() {
            x.data()
                .iter()
                .zip(y.data())
                .map(|(&p, &q)| f(p, q))
                .collect()
        } else if row_broadcast(x, y) {
            let c = x.cols();
            x.data()
                .iter()
                .enumerate()
                .map(|(i, &p)| f(p, y.data()[i % c]))
                .collect()
        } else {
            return Err(ShapeError::new(name, x.shape(), y.shape()));
        };
        Tensor::new(x.shape().to_vec(), data)
    }

    /// Elementwise sum; `b` may be a `[1, cols]` row broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let value = self.binary(a, b, "add", |p, q| p + q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise product; `b` may be a `[1, cols]` row broadcast over `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let value = self.binary(a, b, "mul", |p, q| p * q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Elementwise quotient; `b` may be a `[1, cols]` row broadcast over `a`.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let value = self.binary(a, b, "div", |p, q| p / q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |v| v + c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Op::Recip(a), |v| 1.0 / v)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, Op::Powf(a, p), |v| v.powf(p))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |v| v.max(0.0))
    }

    /// `max(a, floor)`; entries below the floor pass no gradient.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, Op::ClampMin(a, floor), |v| v.max(floor))
    }

    /// Softmax over the last axis. Negative-infinity entries get exactly
    /// zero probability.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let value = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, Op::Softmax(a), rg)
    }

    /// Gathers rows of a rank-2 table.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var, ShapeError> {
        let t = self.value(table);
        if t.shape().len() != 2 || indices.is_empty() {
            return Err(ShapeError::new("gather", t.shape(), &[indices.len()]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.rows()) {
            return Err(ShapeError::new("gather", t.shape(), &[bad]));
        }
        let c = t.cols();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![indices.len(), c], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(value, Op::Gather(table, indices.to_vec()), rg))
    }

    /// Selects columns (last-axis entries) of a matrix, in the given order.
    pub fn select_columns(&mut self, a: Var, columns: &[usize]) -> Result<Var, ShapeError> {
        let x = self.value(a);
        let c = x.cols();
        if columns.is_empty() {
            return Err(ShapeError::new("select_columns", x.shape(), &[0]));
        }
        if let Some(&bad) = columns.iter().find(|&&j| j >= c) {
            return Err(ShapeError::new("select_columns", x.shape(), &[bad]));
        }
        let r = x.rows();
        let mut out = Vec::with_capacity(r * columns.len());
        for i in 0..r {
            let row = x.row(i);
            out.extend(columns.iter().map(|&j| row[j]));
        }
        let value = Tensor::new(vec![r, columns.len()], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SelectColumns(a, columns.to_vec()), rg))
    }

    /// Concatenates matrices along axis 0 (stack rows) or axis 1 (stack
    /// columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, ShapeError> {
        let first = match parts.first() {
            Some(&v) => self.value(v),
            None => return Err(ShapeError::new("concat", &[], &[])),
        };
        let (r0, c0) = (first.rows(), first.cols());
        for &p in &parts[1..] {
            let t = self.value(p);
            let ok = match axis {
                0 => t.cols() == c0,
                1 => t.rows() == r0,
                _ => false,
            };
            if !ok {
                return Err(ShapeError::new("concat", first.shape(), t.shape()));
            }
        }
        let value = if axis == 0 {
            let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
            let mut out = Vec::with_capacity(rows * c0);
            for &p in parts {
                out.extend_from_slice(self.value(p).data());
            }
            Tensor::new(vec![rows, c0], out)?
        } else {
            let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
            let mut out = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for &p in parts {
                    out.extend_from_slice(self.value(p).row(i));
                }
            }
            Tensor::new(vec![r0, cols], out)?
        };
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), rg))
    }

    fn reduce(&self, a: Var, axis: usize, name: &'static str) -> Result<Tensor, ShapeError> {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        match axis {
            0 => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (o, v) in out.iter_mut().zip(x.row(i)) {
                        *o += v;
                    }
                }
                Tensor::new(vec![1, c], out)
            }
            1 => Tensor::new(vec![r, 1], (0..r).map(|i| x.row(i).iter().sum()).collect()),
            _ => Err(ShapeError::new(name, x.shape(), &[axis])),
        }
    }

    /// Sum over rows (axis 0, result `[1, cols]`) or columns (axis 1,
    /// result `[rows, 1]`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, ShapeError> {
        let value = self.reduce(a, axis, "sum_axis")?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SumAxis(a, axis), rg))
    }

    /// Mean over rows (axis 0) or columns (axis 1).
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, ShapeError> {
        let x = self.value(a);
        let n = if axis == 0 { x.rows() } else { x.cols() } as f64;
        let mut value = self.reduce(a, axis, "mean_axis")?;
        for v in value.data_mut() {
            *v /= n;
        }
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::MeanAxis(a, axis), rg))
    }

    /// Replaces entries where `mask` is true with negative infinity, which
    /// [`Graph::softmax`] maps to zero probability.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool]) -> Result<Var, ShapeError> {
        let x = self.value(a);
        if mask.len() != x.len() {
            return Err(ShapeError::new("masked_fill", x.shape(), &[mask.len()]));
        }
        let data = x
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { f64::NEG_INFINITY } else { v })
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::MaskedFill(a, mask.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, ShapeError> {
        let value = self.value(a).reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Leaf-reaching probabilities of balanced binary trees.
    ///
    /// Each row of `split` holds the `2^depth - 1` left-routing
    /// probabilities of one tree in breadth-first node order. The result has
    /// `2^depth` columns, one per leaf from left to right, and entry `k` is
    /// the product of `s` (left) or `1 - s` (right) along the root-to-leaf
    /// path, accumulated from the root down starting at 1.
    pub fn tree_route(&mut self, split: Var, depth: usize) -> Result<Var, ShapeError> {
        let s = self.value(split);
        let internal = (1usize << depth) - 1;
        if depth == 0 || s.cols() != internal {
            return Err(ShapeError::new("tree_route", s.shape(), &[internal]));
        }
        let leaves = internal + 1;
        let rows = s.rows();
        let mut out = Vec::with_capacity(rows * leaves);
        let mut nodes = vec![0.0; internal + leaves];
        for i in 0..rows {
            route_row(s.row(i), &mut nodes);
            out.extend_from_slice(&nodes[internal..]);
        }
        let value = Tensor::new(vec![rows, leaves], out)?;
        let rg = self.rg(&[split]);
        Ok(self.push(value, Op::TreeRoute(split), rg))
    }

    /// Gradients of a scalar `loss` with respect to every leaf that requires
    /// them. Contributions from multiple uses of a node are summed.
    /// Intermediate gradients are freed once propagated.
    pub fn backward(&self, loss: Var) -> Result<Gradients, GraphError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(GraphError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &dy, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(dy);
            }
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.map(|d| Tensor::new(n.value.shape().to_vec(), d).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (x, w) = (self.value(*a), self.value(*b));
                let (m, k, n) = (x.rows(), x.cols(), w.cols());
                self.accumulate(grads, *a, |g| {
                    gemm(m, n, k, dy, false, w.data(), true, g, 1.0)
                });
                self.accumulate(grads, *b, |g| {
                    gemm(k, m, n, x.data(), true, dy, false, g, 1.0)
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                self.accumulate(grads, *a, |g| {
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] += dy[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |g| add_into(g, dy));
                let bl = self.value(*b).len();
                self.accumulate(grads, *b, |g| {
                    for (i, d) in dy.iter().enumerate() {
                        g[i % bl] += d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (x, w) = (self.value(*a).data(), self.value(*b).data());
                let bl = w.len();
                self.accumulate(grads, *a, |g| {
                    for (i, d) in dy.iter().enumerate() {
                        g[i] += d * w[i % bl];
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for (i, d) in dy.iter().enumerate() {
                        g[i % bl] += d * x[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (x, w) = (self.value(*a).data(), self.value(*b).data());
                let bl = w.len();
                self.accumulate(grads, *a, |g| {
                    for (i, d) in dy.iter().enumerate() {
                        g[i] += d / w[i % bl];
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for (i, d) in dy.iter().enumerate() {
                        let q = w[i % bl];
                        g[i % bl] -= d * x[i] / (q * q);
                    }
                });
            }
            Op::TreeRoute(split) => {
                let s = self.value(*split);
                let internal = s.cols();
                let leaves = internal + 1;
                let mut nodes = vec![0.0; internal + leaves];
                let mut up = vec![0.0; internal + leaves];
                self.accumulate(grads, *split, |g| {
                    for i in 0..s.rows() {
                        let srow = s.row(i);
                        route_row(srow, &mut nodes);
                        up[internal..].copy_from_slice(&dy[i * leaves..(i + 1) * leaves]);
                        let grow = &mut g[i * internal..(i + 1) * internal];
                        for k in (0..internal).rev() {
                            let (gl, gr) = (up[2 * k + 1], up[2 * k + 2]);
                            up[k] = gl * srow[k] + gr * (1.0 - srow[k]);
                            grow[k] += nodes[k] * (gl - gr);
                        }
                    }
                });
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, |g| {
                for (gi, d) in g.iter_mut().zip(dy) {
                    *gi += d * c;
                }
            }),
            Op::AddScalar(a) | Op::Reshape(a) => self.accumulate(grads, *a, |g| add_into(g, dy)),
            Op::Sigmoid(a) => self.accumulate(grads, *a, |g| {
                for ((gi, d), s) in g.iter_mut().zip(dy).zip(y) {
                    *gi += d * s * (1.0 - s);
                }
            }),
            Op::Softmax(a) => {
                let c = node.value.cols();
                self.accumulate(grads, *a, |g| {
                    for ((gr, dr), yr) in g.chunks_mut(c).zip(dy.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = dr.iter().zip(yr).map(|(d, s)| d * s).sum();
                        for ((gi, d), s) in gr.iter_mut().zip(dr).zip(yr) {
                            *gi += s * (d - dot);
                        }
                    }
                });
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |g| {
                    for ((gi, d), v) in g.iter_mut().zip(dy).zip(x) {
                        *gi += d / v;
                    }
                });
            }
            Op::Recip(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |g| {
                    for ((gi, d), v) in g.iter_mut().zip(dy).zip(x) {
                        *gi -= d / (v * v);
                    }
                });
            }
            Op::Powf(a, p) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |g| {
                    for ((gi, d), v) in g.iter_mut().zip(dy).zip(x) {
                        *gi += d * p * v.powf(p - 1.0);
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |g| {
                    for ((gi, d), v) in g.iter_mut().zip(dy).zip(x) {
                        if *v > 0.0 {
                            *gi += d;
                        }
                    }
                });
            }
            Op::ClampMin(a, floor) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |g| {
                    for ((gi, d), v) in g.iter_mut().zip(dy).zip(x) {
                        if v >= floor {
                            *gi += d;
                        }
                    }
                });
            }
            Op::Gather(t, indices) => {
                let c = node.value.cols();
                self.accumulate(grads, *t, |g| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut g[i * c..(i + 1) * c], &dy[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::SelectColumns(a, columns) => {
                let src_c = self.value(*a).cols();
                let c = columns.len();
                self.accumulate(grads, *a, |g| {
                    for (gr, dr) in g.chunks_mut(src_c).zip(dy.chunks(c)) {
                        for (&j, d) in columns.iter().zip(dr) {
                            gr[j] += d;
                        }
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let total_c = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let (pr, pc) = (pv.rows(), pv.cols());
                    if *axis == 0 {
                        let n = pv.len();
                        self.accumulate(grads, p, |g| add_into(g, &dy[offset..offset + n]));
                        offset += n;
                    } else {
                        self.accumulate(grads, p, |g| {
                            for i in 0..pr {
                                let src = &dy[i * total_c + offset..i * total_c + offset + pc];
                                add_into(&mut g[i * pc..(i + 1) * pc], src);
                            }
                        });
                        offset += pc;
                    }
                }
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let x = self.value(*a);
                let (r, c) = (x.rows(), x.cols());
                let scale = match (&node.op, axis) {
                    (Op::MeanAxis(..), 0) => 1.0 / r as f64,
                    (Op::MeanAxis(..), _) => 1.0 / c as f64,
                    _ => 1.0,
                };
                self.accumulate(grads, *a, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            let d = if *axis == 0 { dy[j] } else { dy[i] };
                            g[i * c + j] += d * scale;
                        }
                    }
                });
            }
            Op::MaskedFill(a, mask) => self.accumulate(grads, *a, |g| {
                for ((gi, d), m) in g.iter_mut().zip(dy).zip(mask) {
                    if !m {
                        *gi += d;
                    }
                }
            }),
        }
    }
}

/// Breadth-first node probabilities of one tree; `nodes[0]` is the root.
fn route_row(split: &[f64], nodes: &mut [f64]) {
    nodes[0] = 1.0;
    for (k, &s) in split.iter().enumerate() {
        let p = nodes[k];
        nodes[2 * k + 1] = p * s;
        nodes[2 * k + 2] = p * (1.0 - s);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Numerically stable softmax of one row. A row whose entries are all
/// negative infinity becomes NaN.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).data(), &[0.5]);
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let i = g.constant(Tensor::identity(2));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(err.left, vec![2, 3]);
        assert_eq!(err.right, vec![2, 3]);
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn identity_matvec_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::identity(3));
        let x = g.param(Tensor::new(vec![3, 1], vec![0.3, -1.0, 2.0]).unwrap());
        let y = g.matmul(a, x).unwrap();
        // Pick out y_1 to get dy_1/dx.
        let onehot = g.constant(Tensor::new(vec![3, 1], vec![0.0, 1.0, 0.0]).unwrap());
        let picked = g.mul(y, onehot).unwrap();
        let s = g.sum_axis(picked, 0).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(GraphError::NonScalarLoss(_))));
    }

    #[test]
    fn reused_node_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn masked_entries_get_zero_probability_and_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.375, 0.375, 0.1875, 0.0625]));
        let m = g.masked_fill(x, &[false, true, false, false]).unwrap();
        let p = g.softmax(m);
        assert_eq!(g.value(p).data()[1], 0.0);
        let sum: f64 = g.value(p).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(g.non_finite().is_none());
        let w = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
        let l = g.mul(p, w).unwrap();
        let s = g.sum_axis(l, 1).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data()[1], 0.0);
    }

    #[test]
    fn non_finite_reports_primitive() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let _ = g.log(x);
        assert_eq!(g.non_finite().unwrap().op, "log");
    }

    #[test]
    fn row_broadcast_add_sums_gradient_over_rows() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[3, 2]));
        let b = g.param(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let c = g.add(a, b).unwrap();
        let s = g.sum_axis(c, 0).unwrap();
        let s = g.sum_axis(s, 1).unwrap();
        assert_eq!(g.value(s).data(), &[9.0]);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[3.0, 3.0]);
    }
}
