use std::fmt;

use super::tensor::{matmul_raw, transpose_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Exp,
    Log,
    Pow(f64),
    Tanh,
    Sigmoid,
    Silu,
}

/// How the right operand of a binary op is expanded to the left shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs is `[n]` or `[1, n]`, lhs is `[m, n]`
    Row,
    /// rhs is `[m, 1]`, lhs is `[m, n]`
    Col,
    /// rhs holds a single value
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    StopGradient,
    Binary(Binary, Broadcast, NodeId, NodeId),
    ScalarMul(NodeId, f64),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Unary(Unary, NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumRows(NodeId),
    MeanRows(NodeId),
    IndexSelect(NodeId, Vec<usize>),
    ScatterRows(NodeId, Vec<usize>),
    Gather(NodeId, Vec<(usize, usize)>),
    SliceCols(NodeId, usize, usize),
    Concat(Vec<NodeId>, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::StopGradient => "stop_gradient",
            Op::Binary(Binary::Add, ..) => "add",
            Op::Binary(Binary::Sub, ..) => "sub",
            Op::Binary(Binary::Mul, ..) => "mul",
            Op::ScalarMul(..) => "scalar_mul",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Unary(Unary::Exp, _) => "exp",
            Op::Unary(Unary::Log, _) => "log",
            Op::Unary(Unary::Pow(_), _) => "pow",
            Op::Unary(Unary::Tanh, _) => "tanh",
            Op::Unary(Unary::Sigmoid, _) => "sigmoid",
            Op::Unary(Unary::Silu, _) => "silu",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LogSoftmaxRows(_) => "log_softmax_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumRows(_) => "sum_rows",
            Op::MeanRows(_) => "mean_rows",
            Op::IndexSelect(..) => "index_select",
            Op::ScatterRows(..) => "scatter_rows",
            Op::Gather(..) => "gather",
            Op::SliceCols(..) => "slice_cols",
            Op::Concat(..) => "concat",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation. Nodes are stored in creation order,
/// which is a valid topological order for the backward sweep.
pub struct Tape {
    nodes: Vec<Node>,
    checked: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("checked", &self.checked)
            .finish()
    }
}

/// Adjoints of the leaves of a tape after [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Adjoint of `id`; zeros if nothing flowed into it.
    pub fn get(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    pub fn has(&self, id: NodeId) -> bool {
        self.grads[id.0].is_some()
    }
}

fn broadcast_kind(lhs: &[usize], rhs: &[usize]) -> Option<Broadcast> {
    if lhs == rhs {
        return Some(Broadcast::Same);
    }
    let rhs_len: usize = rhs.iter().product();
    if rhs_len == 1 {
        return Some(Broadcast::Scalar);
    }
    if lhs.len() == 2 {
        let (m, n) = (lhs[0], lhs[1]);
        if rhs == [n] || rhs == [1, n] {
            return Some(Broadcast::Row);
        }
        if rhs == [m, 1] {
            return Some(Broadcast::Col);
        }
    }
    None
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            checked: true,
        }
    }

    /// Tape that skips the per-op NaN/Inf guard.
    pub fn unchecked() -> Self {
        Self {
            nodes: Vec::new(),
            checked: false,
        }
    }

    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = match &op {
            Op::Leaf => true,
            Op::Constant | Op::StopGradient => false,
            Op::Binary(_, _, a, b) | Op::MatMul(a, b) => {
                self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
            }
            Op::ScalarMul(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Unary(_, a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::MeanRows(a)
            | Op::IndexSelect(a, _)
            | Op::ScatterRows(a, _)
            | Op::Gather(a, _)
            | Op::SliceCols(a, _, _) => self.nodes[a.0].requires_grad,
            Op::Concat(parts, _) => parts.iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Leaf)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Constant)
    }

    /// Same forward value as `x`; contributes nothing to any adjoint upstream.
    pub fn stop_gradient(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).clone();
        self.push(v, Op::StopGradient)
    }

    /// `f` applied to the value of `x`, behind a stop-gradient.
    pub fn stop_gradient_map<F>(&mut self, x: NodeId, f: F) -> Result<NodeId>
    where
        F: FnOnce(&Tensor) -> Result<Tensor>,
    {
        let v = f(self.value(x))?;
        self.push(v, Op::StopGradient)
    }

    fn binary(&mut self, kind: Binary, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let op_name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let bc = broadcast_kind(&sa, &sb).ok_or(Error::Shape {
            op: op_name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let va = self.value(a);
        let vb = self.value(b).data();
        let cols = va.cols();
        let data: Vec<f64> = va
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &x)| {
                let y = match bc {
                    Broadcast::Same => vb[idx],
                    Broadcast::Row => vb[idx % cols],
                    Broadcast::Col => vb[idx / cols],
                    Broadcast::Scalar => vb[0],
                };
                f(x, y)
            })
            .collect();
        let value = Tensor::new(sa, data)?;
        self.push(value, Op::Binary(kind, bc, a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Sub, a, b)
    }

    /// Elementwise product; `b` may be a row vector, column vector or scalar
    /// broadcast against a matrix `a`.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| c * x);
        self.push(v, Op::ScalarMul(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let v = Tensor::new(vec![m, n], data)?;
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: s,
                rhs: vec![],
            });
        }
        let data = transpose_raw(self.value(a).data(), s[0], s[1]);
        let v = Tensor::new(vec![s[1], s[0]], data)?;
        self.push(v, Op::Transpose(a))
    }

    fn unary(&mut self, kind: Unary, a: NodeId) -> Result<NodeId> {
        let f = |x: f64| match kind {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Pow(p) => x.powf(p),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Silu => x * sigmoid(x),
        };
        let v = self.value(a).map(f);
        self.push(v, Op::Unary(kind, a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Log, a)
    }

    pub fn pow(&mut self, a: NodeId, p: f64) -> Result<NodeId> {
        self.unary(Unary::Pow(p), a)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(Unary::Silu, a)
    }

    fn require_matrix(&self, op: &'static str, a: NodeId) -> Result<(usize, usize)> {
        let s = self.shape(a);
        match s.len() {
            2 => Ok((s[0], s[1])),
            1 => Ok((1, s[0])),
            _ => Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.require_matrix("softmax_rows", a)?;
        let src = self.value(a);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            data.extend(softmax(&src.data()[r * cols..(r + 1) * cols]));
        }
        let v = Tensor::new(src.shape().to_vec(), data)?;
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.require_matrix("log_softmax_rows", a)?;
        let src = self.value(a);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &src.data()[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|&x| x - lse));
        }
        let v = Tensor::new(src.shape().to_vec(), data)?;
        self.push(v, Op::LogSoftmaxRows(a))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    fn column_sums(&self, a: NodeId) -> Result<(usize, Vec<f64>)> {
        let (rows, cols) = self.require_matrix("sum_rows", a)?;
        let t = self.value(a);
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, &x) in out.iter_mut().zip(&t.data()[r * cols..(r + 1) * cols]) {
                *o += x;
            }
        }
        Ok((rows, out))
    }

    /// Sum over rows of an `[m, n]` matrix, giving an `[n]` vector.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (_, sums) = self.column_sums(a)?;
        self.push(Tensor::vector(sums), Op::SumRows(a))
    }

    /// Mean over rows of an `[m, n]` matrix, giving an `[n]` vector.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (rows, sums) = self.column_sums(a)?;
        let means = sums.into_iter().map(|s| s / rows as f64).collect();
        self.push(Tensor::vector(means), Op::MeanRows(a))
    }

    /// Rows of `a` at `indices` (repeats allowed).
    pub fn index_select(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.require_matrix("index_select", a)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape {
                op: "index_select",
                lhs: self.shape(a).to_vec(),
                rhs: vec![bad],
            });
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(src.row(i));
        }
        let v = Tensor::new(vec![indices.len(), cols], data)?;
        self.push(v, Op::IndexSelect(a, indices.to_vec()))
    }

    /// Scatters the rows of `a` into a zero `[out_rows, n]` matrix, adding
    /// rows that land on the same index in order.
    pub fn scatter_rows(&mut self, a: NodeId, indices: &[usize], out_rows: usize) -> Result<NodeId> {
        let (rows, cols) = self.require_matrix("scatter_rows", a)?;
        if rows != indices.len() || indices.iter().any(|&i| i >= out_rows) {
            return Err(Error::Shape {
                op: "scatter_rows",
                lhs: self.shape(a).to_vec(),
                rhs: vec![indices.len(), out_rows],
            });
        }
        let src = self.value(a);
        let mut data = vec![0.0; out_rows * cols];
        for (r, &i) in indices.iter().enumerate() {
            for (o, &x) in data[i * cols..(i + 1) * cols].iter_mut().zip(src.row(r)) {
                *o += x;
            }
        }
        let v = Tensor::new(vec![out_rows, cols], data)?;
        self.push(v, Op::ScatterRows(a, indices.to_vec()))
    }

    /// Picks entries `(row, col)` of a matrix into a tensor of shape `shape`.
    pub fn gather(&mut self, a: NodeId, coords: &[(usize, usize)], shape: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.require_matrix("gather", a)?;
        let expected: usize = shape.iter().product();
        if expected != coords.len() || coords.iter().any(|&(r, c)| r >= rows || c >= cols) {
            return Err(Error::Shape {
                op: "gather",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let src = self.value(a);
        let data = coords.iter().map(|&(r, c)| src.data()[r * cols + c]).collect();
        let v = Tensor::new(shape.to_vec(), data)?;
        self.push(v, Op::Gather(a, coords.to_vec()))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (rows, cols) = self.require_matrix("slice_cols", a)?;
        if start >= end || end > cols {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: self.shape(a).to_vec(),
                rhs: vec![start, end],
            });
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&src.row(r)[start..end]);
        }
        let v = Tensor::new(vec![rows, end - start], data)?;
        self.push(v, Op::SliceCols(a, start, end))
    }

    /// Concatenates matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::Shape {
                op: "concat",
                lhs: vec![],
                rhs: vec![],
            });
        };
        let (r0, c0) = self.require_matrix("concat", first)?;
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.require_matrix("concat", p)?;
            let ok = match axis {
                0 => c == c0,
                1 => r == r0,
                _ => false,
            };
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            dims.push((r, c));
        }
        let (shape, data) = if axis == 0 {
            let rows = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            (vec![rows, c0], data)
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(r));
                }
            }
            (vec![r0, cols], data)
        };
        let v = Tensor::new(shape, data)?;
        self.push(v, Op::Concat(parts.to_vec(), axis))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_val = self.value(root);
        if !root_val.is_scalar() {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            adj[root.0] = Some(Tensor::new(root_val.shape().to_vec(), vec![1.0])?);
        }
        for id in (0..=root.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut adj);
            adj[id] = Some(g);
        }
        let grads = adj
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| if matches!(n.op, Op::Leaf) { g } else { None })
            .collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], target: NodeId, contribution: Tensor) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut adj[target.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf | Op::Constant | Op::StopGradient => {}
            Op::Binary(kind, bc, a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let cols = va.cols();
                let rhs_at = |idx: usize| match bc {
                    Broadcast::Same => vb.data()[idx],
                    Broadcast::Row => vb.data()[idx % cols],
                    Broadcast::Col => vb.data()[idx / cols],
                    Broadcast::Scalar => vb.data()[0],
                };
                if self.nodes[a.0].requires_grad {
                    let ga = match kind {
                        Binary::Add | Binary::Sub => g.clone(),
                        Binary::Mul => {
                            let data = g.data().iter().enumerate().map(|(i, &gi)| gi * rhs_at(i)).collect();
                            Tensor::new(g.shape().to_vec(), data).expect("shape")
                        }
                    };
                    self.accumulate(adj, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; vb.len()];
                    for (i, &gi) in g.data().iter().enumerate() {
                        let contrib = match kind {
                            Binary::Add => gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * va.data()[i],
                        };
                        let slot = match bc {
                            Broadcast::Same => i,
                            Broadcast::Row => i % cols,
                            Broadcast::Col => i / cols,
                            Broadcast::Scalar => 0,
                        };
                        gb[slot] += contrib;
                    }
                    let gb = Tensor::new(vb.shape().to_vec(), gb).expect("shape");
                    self.accumulate(adj, *b, gb);
                }
            }
            Op::ScalarMul(a, c) => self.accumulate(adj, *a, g.map(|x| c * x)),
            Op::AddScalar(a) => self.accumulate(adj, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.0].requires_grad {
                    let bt = transpose_raw(self.value(*b).data(), k, n);
                    let ga = matmul_raw(g.data(), &bt, m, n, k);
                    self.accumulate(adj, *a, Tensor::new(vec![m, k], ga).expect("shape"));
                }
                if self.nodes[b.0].requires_grad {
                    let at = transpose_raw(self.value(*a).data(), m, k);
                    let gb = matmul_raw(&at, g.data(), k, m, n);
                    self.accumulate(adj, *b, Tensor::new(vec![k, n], gb).expect("shape"));
                }
            }
            Op::Transpose(a) => {
                let s = g.shape();
                let data = transpose_raw(g.data(), s[0], s[1]);
                self.accumulate(adj, *a, Tensor::new(vec![s[1], s[0]], data).expect("shape"));
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a);
                let y = &node.value;
                let data = (0..g.len())
                    .map(|i| {
                        let (xi, yi, gi) = (x.data()[i], y.data()[i], g.data()[i]);
                        gi * match kind {
                            Unary::Exp => yi,
                            Unary::Log => 1.0 / xi,
                            Unary::Pow(p) => p * xi.powf(p - 1.0),
                            Unary::Tanh => 1.0 - yi * yi,
                            Unary::Sigmoid => yi * (1.0 - yi),
                            Unary::Silu => {
                                let s = sigmoid(xi);
                                s + xi * s * (1.0 - s)
                            }
                        }
                    })
                    .collect();
                self.accumulate(adj, *a, Tensor::new(x.shape().to_vec(), data).expect("shape"));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let cols = y.cols();
                let mut data = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let ys = &y.data()[r * cols..(r + 1) * cols];
                    let gs = &g.data()[r * cols..(r + 1) * cols];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        data[r * cols + c] = ys[c] * (gs[c] - dot);
                    }
                }
                self.accumulate(adj, *a, Tensor::new(y.shape().to_vec(), data).expect("shape"));
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let cols = y.cols();
                let mut data = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let ys = &y.data()[r * cols..(r + 1) * cols];
                    let gs = &g.data()[r * cols..(r + 1) * cols];
                    let gsum: f64 = gs.iter().sum();
                    for c in 0..cols {
                        data[r * cols + c] = gs[c] - ys[c].exp() * gsum;
                    }
                }
                self.accumulate(adj, *a, Tensor::new(y.shape().to_vec(), data).expect("shape"));
            }
            Op::Sum(a) => {
                let g0 = g.item();
                self.accumulate(adj, *a, self.value(*a).map(|_| g0));
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let g0 = g.item() / x.len() as f64;
                self.accumulate(adj, *a, x.map(|_| g0));
            }
            Op::SumRows(a) | Op::MeanRows(a) => {
                let x = self.value(*a);
                let scale = if matches!(node.op, Op::MeanRows(_)) {
                    1.0 / x.rows() as f64
                } else {
                    1.0
                };
                let cols = x.cols();
                let data = (0..x.len()).map(|i| g.data()[i % cols] * scale).collect();
                self.accumulate(adj, *a, Tensor::new(x.shape().to_vec(), data).expect("shape"));
            }
            Op::IndexSelect(a, indices) => {
                let x = self.value(*a);
                let cols = x.cols();
                let mut data = vec![0.0; x.len()];
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..cols {
                        data[i * cols + c] += g.data()[r * cols + c];
                    }
                }
                self.accumulate(adj, *a, Tensor::new(x.shape().to_vec(), data).expect("shape"));
            }
            Op::ScatterRows(a, indices) => {
                let x = self.value(*a);
                let cols = x.cols();
                let mut data = Vec::with_capacity(x.len());
                for &i in indices {
                    data.extend_from_slice(&g.data()[i * cols..(i + 1) * cols]);
                }
                self.accumulate(adj, *a, Tensor::new(x.shape().to_vec(), data).expect("shape"));
            }
            Op::Gather(a, coords) => {
                let x = self.value(*a);
                let cols = x.cols();
                let mut data = vec![0.0; x.len()];
                for (k, &(r, c)) in coords.iter().enumerate() {
                    data[r * cols + c] += g.data()[k];
                }
                self.accumulate(adj, *a, Tensor::new(x.shape().to_vec(), data).expect("shape"));
            }
            Op::SliceCols(a, start, end) => {
                let x = self.value(*a);
                let cols = x.cols();
                let width = end - start;
                let mut data = vec![0.0; x.len()];
                for r in 0..x.rows() {
                    data[r * cols + start..r * cols + end].copy_from_slice(&g.data()[r * width..(r + 1) * width]);
                }
                self.accumulate(adj, *a, Tensor::new(x.shape().to_vec(), data).expect("shape"));
            }
            Op::Concat(parts, axis) => {
                let total_cols = g.cols();
                let mut row_offset = 0;
                let mut col_offset = 0;
                for &p in parts {
                    let x = self.value(p);
                    let (rows, cols) = (x.rows(), x.cols());
                    let data = if *axis == 0 {
                        let d = g.data()[row_offset * cols..(row_offset + rows) * cols].to_vec();
                        row_offset += rows;
                        d
                    } else {
                        let mut d = Vec::with_capacity(rows * cols);
                        for r in 0..rows {
                            let base = r * total_cols + col_offset;
                            d.extend_from_slice(&g.data()[base..base + cols]);
                        }
                        col_offset += cols;
                        d
                    };
                    self.accumulate(adj, p, Tensor::new(x.shape().to_vec(), data).expect("shape"));
                }
            }
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

/// Softmax of one row with max subtraction.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}
