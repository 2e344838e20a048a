//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every primitive records its output value and its inputs on an
//! append-only tape. [`Tape::backward`] walks the tape once in reverse and
//! returns adjoints for the leaves created with [`Tape::param`]. Leaves made
//! with [`Tape::constant`] never receive a gradient, and nodes that do not
//! depend on any parameter are skipped entirely.
//!
//! All primitives work on the matrix view of a tensor (see
//! [`Tensor::dims2`]); higher-rank tensors must be reshaped first.

use std::collections::HashMap;

use crate::error::{CcpError, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
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
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    MulScalar(usize, usize),
    AddScalar(usize, usize),
    MulColumn(usize, usize),
    AddRow(usize, usize),
    RowSoftmax(usize),
    RowLogSoftmax(usize),
    Sigmoid(usize),
    Elu(usize),
    Exp(usize),
    Log(usize),
    PowNegHalf(usize),
    ClampMin(usize, f64),
    SumAll(usize),
    SumRows(usize),
    GatherRows(usize, Vec<usize>),
    GatherElements(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
    Reshape(usize),
    ZeroDiagonal(usize),
    Diagonal(usize),
    TileRows(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Adjoints of the trainable leaves after a backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    by_leaf: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.by_leaf.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.by_leaf.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2()
        .ok_or_else(|| CcpError::shape(op, format!("expected a matrix, got {:?}", t.shape())))
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(CcpError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(CcpError::shape(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(name, value, op, &[a.0])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(name, value, op, &[a.0, b.0])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims("matmul", self.value(a))?;
        let (k2, n) = dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(CcpError::shape(
                "matmul",
                format!("{:?} x {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let data = tensor::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], data)?, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims("transpose", self.value(a))?;
        let data = tensor::transpose(self.value(a).data(), r, c);
        self.push("transpose", Tensor::new(vec![c, r], data)?, Op::Transpose(a.0), &[a.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a.0, b.0), |x, y| x / y)
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, Op::Scale(a.0, c), |x| c * x)
    }

    /// Addition of a constant.
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("shift", a, Op::Shift(a.0), |x| x + c)
    }

    fn single(&self, op: &'static str, s: Var) -> Result<f64> {
        let t = self.value(s);
        if t.len() != 1 {
            return Err(CcpError::shape(op, format!("expected one element, got {:?}", t.shape())));
        }
        Ok(t.data()[0])
    }

    /// Multiplies every entry of `a` by the single-element node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.single("mul_scalar", s)?;
        let value = self.value(a).map(|x| c * x);
        self.push("mul_scalar", value, Op::MulScalar(a.0, s.0), &[a.0, s.0])
    }

    /// Adds the single-element node `s` to every entry of `a`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.single("add_scalar", s)?;
        let value = self.value(a).map(|x| x + c);
        self.push("add_scalar", value, Op::AddScalar(a.0, s.0), &[a.0, s.0])
    }

    /// Scales row i of `a` (r×c) by entry i of `col` (r×1).
    pub fn mul_column(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = dims("mul_column", self.value(a))?;
        if self.value(col).len() != r {
            return Err(CcpError::shape(
                "mul_column",
                format!("{:?} rows vs column {:?}", self.value(a).shape(), self.value(col).shape()),
            ));
        }
        let va = self.value(a).data();
        let vc = self.value(col).data();
        let data = (0..r * c).map(|idx| va[idx] * vc[idx / c]).collect();
        let value = Tensor::new(vec![r, c], data)?;
        self.push("mul_column", value, Op::MulColumn(a.0, col.0), &[a.0, col.0])
    }

    /// Adds the length-c vector `row` to every row of `a` (r×c).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = dims("add_row", self.value(a))?;
        if self.value(row).len() != c {
            return Err(CcpError::shape(
                "add_row",
                format!("{:?} vs row {:?}", self.value(a).shape(), self.value(row).shape()),
            ));
        }
        let va = self.value(a).data();
        let vr = self.value(row).data();
        let data = (0..r * c).map(|idx| va[idx] + vr[idx % c]).collect();
        let value = Tensor::new(vec![r, c], data)?;
        self.push("add_row", value, Op::AddRow(a.0, row.0), &[a.0, row.0])
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        dims("row_softmax", self.value(a))?;
        let value = self.value(a).row_softmax();
        self.push("row_softmax", value, Op::RowSoftmax(a.0), &[a.0])
    }

    pub fn row_log_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims("row_log_softmax", self.value(a))?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c.max(1)).take(r) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let value = Tensor::new(vec![r, c], data)?;
        self.push("row_log_softmax", value, Op::RowLogSoftmax(a.0), &[a.0])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, Op::Sigmoid(a.0), sigmoid)
    }

    /// ELU with unit scale.
    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.unary("elu", a, Op::Elu(a.0), |x| if x > 0.0 { x } else { x.exp_m1() })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a.0), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, Op::Log(a.0), f64::ln)
    }

    /// Elementwise `x^(-1/2)`.
    pub fn pow_neg_half(&mut self, a: Var) -> Result<Var> {
        self.unary("pow_neg_half", a, Op::PowNegHalf(a.0), |x| 1.0 / x.sqrt())
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.unary("clamp_min", a, Op::ClampMin(a.0, floor), |x| x.max(floor))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).sum();
        self.push("sum_all", Tensor::scalar(total), Op::SumAll(a.0), &[a.0])
    }

    /// Row sums as an r×1 column.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims("sum_rows", self.value(a))?;
        let va = self.value(a).data();
        let data = (0..r).map(|i| va[i * c..(i + 1) * c].iter().sum()).collect();
        self.push("sum_rows", Tensor::column(data), Op::SumRows(a.0), &[a.0])
    }

    /// Selects rows by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let (r, c) = dims("gather_rows", self.value(a))?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(CcpError::shape("gather_rows", format!("row {} out of {}", bad, r)));
        }
        let va = self.value(a).data();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in &indices {
            data.extend_from_slice(&va[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![indices.len(), c], data)?;
        self.push("gather_rows", value, Op::GatherRows(a.0, indices), &[a.0])
    }

    /// Selects entries by flat row-major index into an n×1 column.
    pub fn gather_elements(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let n = self.value(a).len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(CcpError::shape("gather_elements", format!("index {} out of {}", bad, n)));
        }
        let va = self.value(a).data();
        let data = indices.iter().map(|&i| va[i]).collect();
        self.push(
            "gather_elements",
            Tensor::column(data),
            Op::GatherElements(a.0, indices),
            &[a.0],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| CcpError::shape("concat_rows", "no inputs"))?;
        let c = dims("concat_rows", self.value(first))?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = dims("concat_rows", self.value(p))?;
            if pc != c {
                return Err(CcpError::shape("concat_rows", format!("{} vs {} columns", pc, c)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let value = Tensor::new(vec![rows, c], data)?;
        self.push("concat_rows", value, Op::ConcatRows(idx.clone()), &idx)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(a)
            .reshaped(shape)
            .map_err(|_| CcpError::shape("reshape", format!("{:?} -> {:?}", self.value(a).shape(), shape)))?;
        self.push("reshape", value, Op::Reshape(a.0), &[a.0])
    }

    /// `A − I∘A`.
    pub fn zero_diagonal(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims("zero_diagonal", self.value(a))?;
        if r != c {
            return Err(CcpError::shape("zero_diagonal", format!("{}x{} is not square", r, c)));
        }
        let mut value = self.value(a).clone();
        for i in 0..r {
            value.set(i, i, 0.0);
        }
        self.push("zero_diagonal", value, Op::ZeroDiagonal(a.0), &[a.0])
    }

    /// Diagonal of a square matrix as an n×1 column.
    pub fn diagonal(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims("diagonal", self.value(a))?;
        if r != c {
            return Err(CcpError::shape("diagonal", format!("{}x{} is not square", r, c)));
        }
        let va = self.value(a);
        let data = (0..r).map(|i| va.at(i, i)).collect();
        self.push("diagonal", Tensor::column(data), Op::Diagonal(a.0), &[a.0])
    }

    /// Stacks `times` copies of `a` vertically.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let (r, c) = dims("tile_rows", self.value(a))?;
        let data = self.value(a).data().repeat(times);
        let value = Tensor::new(vec![r * times, c], data)?;
        self.push("tile_rows", value, Op::TileRows(a.0, times), &[a.0])
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(CcpError::shape(
                "backward",
                format!("output must be scalar, got {:?}", out.shape()),
            ));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=output.0).map(|_| None).collect();
        adj[output.0] = Some(Tensor::full(out.shape(), 1.0));
        let mut grads = Gradients::default();

        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            if let Op::Leaf = node.op {
                grads.by_leaf.insert(Var(id), g);
                continue;
            }
            self.propagate(id, &g, &mut adj)?;
        }
        Ok(grads)
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], i: usize, delta: Tensor) {
        match &mut adj[i] {
            Some(acc) => {
                for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn like(&self, i: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(self.nodes[i].value.shape().to_vec(), data).expect("adjoint shape")
    }

    fn propagate(&self, id: usize, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let y = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = va.dims2().expect("matrix");
                let n = vb.cols();
                if self.wants(*a) {
                    let d = tensor::matmul_nt(gd, vb.data(), m, n, k);
                    self.accumulate(adj, *a, self.like(*a, d));
                }
                if self.wants(*b) {
                    let d = tensor::matmul_tn(va.data(), gd, m, k, n);
                    self.accumulate(adj, *b, self.like(*b, d));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = y.dims2().expect("matrix");
                let d = tensor::transpose(gd, r, c);
                self.accumulate(adj, *a, self.like(*a, d));
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    self.accumulate(adj, *a, self.like(*a, gd.to_vec()));
                }
                if self.wants(*b) {
                    self.accumulate(adj, *b, self.like(*b, gd.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    self.accumulate(adj, *a, self.like(*a, gd.to_vec()));
                }
                if self.wants(*b) {
                    self.accumulate(adj, *b, self.like(*b, gd.iter().map(|x| -x).collect()));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                if self.wants(*a) {
                    let d = gd.iter().zip(vb).map(|(g, y)| g * y).collect();
                    self.accumulate(adj, *a, self.like(*a, d));
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(va).map(|(g, x)| g * x).collect();
                    self.accumulate(adj, *b, self.like(*b, d));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                if self.wants(*a) {
                    let d = gd.iter().zip(vb).map(|(g, y)| g / y).collect();
                    self.accumulate(adj, *a, self.like(*a, d));
                }
                if self.wants(*b) {
                    let d = gd
                        .iter()
                        .zip(va.iter().zip(vb))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    self.accumulate(adj, *b, self.like(*b, d));
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(adj, *a, self.like(*a, gd.iter().map(|g| g * c).collect()));
            }
            Op::Shift(a) => {
                self.accumulate(adj, *a, self.like(*a, gd.to_vec()));
            }
            Op::MulScalar(a, s) => {
                let va = self.nodes[*a].value.data();
                let c = self.nodes[*s].value.data()[0];
                if self.wants(*a) {
                    self.accumulate(adj, *a, self.like(*a, gd.iter().map(|g| g * c).collect()));
                }
                if self.wants(*s) {
                    let d: f64 = gd.iter().zip(va).map(|(g, x)| g * x).sum();
                    self.accumulate(adj, *s, self.like(*s, vec![d]));
                }
            }
            Op::AddScalar(a, s) => {
                if self.wants(*a) {
                    self.accumulate(adj, *a, self.like(*a, gd.to_vec()));
                }
                if self.wants(*s) {
                    self.accumulate(adj, *s, self.like(*s, vec![gd.iter().sum()]));
                }
            }
            Op::MulColumn(a, col) => {
                let va = self.nodes[*a].value.data();
                let vc = self.nodes[*col].value.data();
                let c = y.cols();
                if self.wants(*a) {
                    let d = gd.iter().enumerate().map(|(i, g)| g * vc[i / c]).collect();
                    self.accumulate(adj, *a, self.like(*a, d));
                }
                if self.wants(*col) {
                    let d = (0..vc.len())
                        .map(|i| (0..c).map(|j| gd[i * c + j] * va[i * c + j]).sum())
                        .collect();
                    self.accumulate(adj, *col, self.like(*col, d));
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    self.accumulate(adj, *a, self.like(*a, gd.to_vec()));
                }
                if self.wants(*row) {
                    let c = y.cols();
                    let mut d = vec![0.0; c];
                    for (idx, g) in gd.iter().enumerate() {
                        d[idx % c] += g;
                    }
                    self.accumulate(adj, *row, self.like(*row, d));
                }
            }
            Op::RowSoftmax(a) => {
                let c = y.cols().max(1);
                let mut d = vec![0.0; gd.len()];
                for ((drow, grow), yrow) in d.chunks_mut(c).zip(gd.chunks(c)).zip(y.data().chunks(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, p)| g * p).sum();
                    for ((o, g), p) in drow.iter_mut().zip(grow).zip(yrow) {
                        *o = p * (g - dot);
                    }
                }
                self.accumulate(adj, *a, self.like(*a, d));
            }
            Op::RowLogSoftmax(a) => {
                let c = y.cols().max(1);
                let mut d = vec![0.0; gd.len()];
                for ((drow, grow), yrow) in d.chunks_mut(c).zip(gd.chunks(c)).zip(y.data().chunks(c)) {
                    let total: f64 = grow.iter().sum();
                    for ((o, g), ly) in drow.iter_mut().zip(grow).zip(yrow) {
                        *o = g - ly.exp() * total;
                    }
                }
                self.accumulate(adj, *a, self.like(*a, d));
            }
            Op::Sigmoid(a) => {
                let d = gd.iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                self.accumulate(adj, *a, self.like(*a, d));
            }
            Op::Elu(a) => {
                let x = self.nodes[*a].value.data();
                let d = gd
                    .iter()
                    .zip(x.iter().zip(y.data()))
                    .map(|(g, (x, y))| if *x > 0.0 { *g } else { g * (y + 1.0) })
                    .collect();
                self.accumulate(adj, *a, self.like(*a, d));
            }
            Op::Exp(a) => {
                let d = gd.iter().zip(y.data()).map(|(g, e)| g * e).collect();
                self.accumulate(adj, *a, self.like(*a, d));
            }
            Op::Log(a) => {
                let x = self.nodes[*a].value.data();
                let d = gd.iter().zip(x).map(|(g, x)| g / x).collect();
                self.accumulate(adj, *a, self.like(*a, d));
            }
            Op::PowNegHalf(a) => {
                let d = gd
                    .iter()
                    .zip(y.data())
                    .map(|(g, r)| -0.5 * g * r * r * r)
                    .collect();
                self.accumulate(adj, *a, self.like(*a, d));
            }
            Op::ClampMin(a, floor) => {
                let x = self.nodes[*a].value.data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(g, x)| if x > floor { *g } else { 0.0 })
                    .collect();
                self.accumulate(adj, *a, self.like(*a, d));
            }
            Op::SumAll(a) => {
                let n = self.nodes[*a].value.len();
                self.accumulate(adj, *a, self.like(*a, vec![gd[0]; n]));
            }
            Op::SumRows(a) => {
                let c = self.nodes[*a].value.cols();
                let n = self.nodes[*a].value.len();
                let d = (0..n).map(|idx| gd[idx / c]).collect();
                self.accumulate(adj, *a, self.like(*a, d));
            }
            Op::GatherRows(a, indices) => {
                let src = &self.nodes[*a].value;
                let c = src.cols();
                let mut d = vec![0.0; src.len()];
                for (out_row, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += gd[out_row * c + j];
                    }
                }
                self.accumulate(adj, *a, self.like(*a, d));
            }
            Op::GatherElements(a, indices) => {
                let mut d = vec![0.0; self.nodes[*a].value.len()];
                for (g, &i) in gd.iter().zip(indices) {
                    d[i] += g;
                }
                self.accumulate(adj, *a, self.like(*a, d));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p].value.len();
                    if self.wants(p) {
                        self.accumulate(adj, p, self.like(p, gd[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::Reshape(a) => {
                self.accumulate(adj, *a, self.like(*a, gd.to_vec()));
            }
            Op::ZeroDiagonal(a) => {
                let n = y.rows();
                let mut d = gd.to_vec();
                for i in 0..n {
                    d[i * n + i] = 0.0;
                }
                self.accumulate(adj, *a, self.like(*a, d));
            }
            Op::Diagonal(a) => {
                let n = y.rows();
                let mut d = vec![0.0; n * n];
                for i in 0..n {
                    d[i * n + i] = gd[i];
                }
                self.accumulate(adj, *a, self.like(*a, d));
            }
            Op::TileRows(a, times) => {
                let n = self.nodes[*a].value.len();
                let mut d = vec![0.0; n];
                for block in gd.chunks(n).take(*times) {
                    for (o, g) in d.iter_mut().zip(block) {
                        *o += g;
                    }
                }
                self.accumulate(adj, *a, self.like(*a, d));
            }
        }
        Ok(())
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

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::from_rows(&[v.to_vec()]).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(row(&[0.0, 0.0, 0.0]));
        let y = tape.row_softmax(x).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut tape = Tape::new();
        let base = [0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = base.iter().map(|x| x + 17.25).collect();
        let a = tape.constant(row(&base));
        let b = tape.constant(row(&shifted));
        let sa = tape.row_softmax(a).unwrap();
        let sb = tape.row_softmax(b).unwrap();
        assert!(tape.value(sa).max_abs_diff(tape.value(sb)) < 1e-15);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(row(&[1000.0, 0.0]));
        let y = tape.row_softmax(x).unwrap();
        assert!(tape.value(y).is_finite());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 4.0]]).unwrap());
        let s = tape.sum_all(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(row(&[1.0, 2.0]));
        let p = tape.param(row(&[3.0, 4.0]));
        let m = tape.mul(c, p).unwrap();
        let s = tape.sum_all(m).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut tape = Tape::new();
        let p = tape.param(row(&[1.0, 2.0]));
        assert!(tape.backward(p).is_err());
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(row(&[1.0, 2.0]));
        let b = tape.constant(row(&[1.0, 2.0, 3.0]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[1, 2]"), "{err}");
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let z = tape.constant(row(&[0.0]));
        assert!(matches!(tape.log(z), Err(CcpError::NonFinite { op: "log" })));
        assert!(tape.pow_neg_half(z).is_err());
    }

    #[test]
    fn gather_rows_accumulates_duplicates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap());
        let g = tape.gather_rows(x, vec![2, 0, 2, 2]).unwrap();
        let s = tape.sum_all(g).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 3.0]);
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut tape = Tape::new();
            let u = tape.param(
                Tensor::from_rows(&[vec![0.1, -0.4, 0.9], vec![1.3, 0.2, -0.7]]).unwrap(),
            );
            let k = tape.row_softmax(u).unwrap();
            let kt = tape.transpose(k).unwrap();
            let kk = tape.matmul(kt, k).unwrap();
            let e = tape.elu(kk).unwrap();
            let s = tape.sum_all(e).unwrap();
            let g = tape.backward(s).unwrap();
            (tape.scalar(s).to_bits(), g.get(u).unwrap().clone())
        };
        let (a, ga) = run();
        let (b, gb) = run();
        assert_eq!(a, b);
        assert!(ga.data().iter().zip(gb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
