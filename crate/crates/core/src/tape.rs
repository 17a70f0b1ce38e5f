//! Reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation of one loss evaluation. Nodes are
//! appended in evaluation order, so the reverse of insertion order is a
//! valid topological order for the backward sweep. Constants (inputs,
//! noise masks, detached proxy targets) never receive gradient.

use crate::error::{contract, Result};
use crate::specfun::{digamma_unchecked, log_gamma_unchecked};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return contract(format!("matrix {rows}x{cols} given {} values", data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return contract("ragged rows");
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self { rows: 1, cols: data.len(), data }
    }

    pub fn scalar(v: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    /// Rows selected by `idx`, in that order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: idx.len(), cols: self.cols, data }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Self) {
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Self {
        debug_assert_eq!(self.cols, other.rows);
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`.
    fn matmul_t(&self, other: &Self) -> Self {
        debug_assert_eq!(self.cols, other.cols);
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = a.iter().zip(other.row(j)).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    /// `selfᵀ · other`.
    fn t_matmul(&self, other: &Self) -> Self {
        debug_assert_eq!(self.rows, other.rows);
        let mut out = Self::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let b = other.row(r);
            for (i, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &v) in out_row.iter_mut().zip(b) {
                    *o += a * v;
                }
            }
        }
        out
    }

    /// Adds the `1 x cols` row vector to every row.
    pub fn add_row(&self, bias: &Self) -> Self {
        let mut out = self.clone();
        for i in 0..self.rows {
            for (o, b) in out.data[i * self.cols..(i + 1) * self.cols].iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        out
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    LnGamma(Var),
    Square(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    LogSoftmax(Var),
    Pick(Var, Vec<usize>),
    SumRows(Var),
    SumAll(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Gradients from one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// `None` when no gradient reached the node (constants, detached
    /// branches, or nodes the loss does not depend on).
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the value of `v` into a new constant; gradient does not flow
    /// back through the copy.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, value: Matrix, op: Op) -> Var {
        let needs = self.nodes[a.0].needs_grad;
        self.push(value, op, needs)
    }

    fn binary(&mut self, a: Var, b: Var, value: Matrix, op: Op) -> Var {
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(value, op, needs)
    }

    fn same_shape(&self, a: Var, b: Var) {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((x.rows, x.cols), (y.rows, y.cols), "elementwise op on mismatched shapes");
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.binary(a, b, v, Op::MatMul(a, b))
    }

    /// Broadcast-adds a `1 x n` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let v = self.value(a).add_row(self.value(bias));
        self.binary(a, bias, v, Op::AddRow(a, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b);
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        self.binary(a, b, v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b);
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        self.binary(a, b, v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b);
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.binary(a, b, v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b);
        let v = self.value(a).zip(self.value(b), |x, y| x / y);
        self.binary(a, b, v, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.unary(a, v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.unary(a, v, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.unary(a, v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.unary(a, v, Op::Ln(a))
    }

    /// Elementwise `ln Γ`; derivative is the digamma function.
    pub fn ln_gamma(&mut self, a: Var) -> Var {
        let v = self.value(a).map(log_gamma_unchecked);
        self.unary(a, v, Op::LnGamma(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.unary(a, v, Op::Square(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.unary(a, v, Op::Relu(a))
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.unary(a, v, Op::Clamp(a, lo, hi))
    }

    /// Row-wise `z − logsumexp(z)`.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for i in 0..x.rows {
            let lse = crate::specfun::log_sum_exp_unchecked(x.row(i));
            v.data[i * x.cols..(i + 1) * x.cols].iter_mut().for_each(|e| *e -= lse);
        }
        self.unary(a, v, Op::LogSoftmax(a))
    }

    /// Picks column `idx[i]` from row `i`, giving a `rows x 1` column.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        assert_eq!(idx.len(), x.rows, "one index per row");
        let data = idx.iter().enumerate().map(|(i, &c)| x.get(i, c)).collect();
        let v = Matrix { rows: x.rows, cols: 1, data };
        self.unary(a, v, Op::Pick(a, idx.to_vec()))
    }

    /// Row sums as a `rows x 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows).map(|i| x.row(i).iter().sum()).collect();
        let v = Matrix { rows: x.rows, cols: 1, data };
        self.unary(a, v, Op::SumRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).data.iter().sum());
        self.unary(a, v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).data.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data[0]
    }

    /// Reverse sweep from a scalar `loss`. Each call starts from zeroed
    /// accumulators.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let Some(node) = self.nodes.get(loss.0) else {
            return contract("backward on a node that was never recorded");
        };
        if (node.value.rows, node.value.cols) != (1, 1) {
            return contract(format!(
                "backward needs a scalar loss, got {}x{}",
                node.value.rows, node.value.cols
            ));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for (i, slot) in grads.iter_mut().enumerate() {
            if !self.nodes[i].needs_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, contribution: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&contribution),
                slot @ None => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    send(*a, g.matmul_t(val(*b)));
                }
                if self.nodes[b.0].needs_grad {
                    send(*b, val(*a).t_matmul(g));
                }
            }
            Op::AddRow(a, b) => {
                send(*a, g.clone());
                if self.nodes[b.0].needs_grad {
                    let mut col_sums = Matrix::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for (s, v) in col_sums.data.iter_mut().zip(g.row(i)) {
                            *s += v;
                        }
                    }
                    send(*b, col_sums);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                send(*a, g.zip(val(*b), |x, y| x * y));
                send(*b, g.zip(val(*a), |x, y| x * y));
            }
            Op::Div(a, b) => {
                let (x, y) = (val(*a), val(*b));
                send(*a, g.zip(y, |gv, yv| gv / yv));
                if self.nodes[b.0].needs_grad {
                    let mut gb = g.zip(x, |gv, xv| gv * xv);
                    gb.data.iter_mut().zip(&y.data).for_each(|(v, yv)| *v = -*v / (yv * yv));
                    send(*b, gb);
                }
            }
            Op::Scale(a, s) => send(*a, g.map(|x| x * s)),
            Op::AddScalar(a) => send(*a, g.clone()),
            // a zero upstream gradient stays zero even where exp overflowed
            Op::Exp(a) => send(*a, g.zip(&node.value, |gv, y| if gv == 0.0 { 0.0 } else { gv * y })),
            Op::Ln(a) => send(*a, g.zip(val(*a), |gv, x| gv / x)),
            Op::LnGamma(a) => send(*a, g.zip(val(*a), |gv, x| gv * digamma_unchecked(x))),
            Op::Square(a) => send(*a, g.zip(val(*a), |gv, x| 2.0 * gv * x)),
            Op::Relu(a) => send(*a, g.zip(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                send(*a, g.zip(val(*a), |gv, x| if x > lo && x < hi { gv } else { 0.0 }))
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut ga = g.clone();
                for i in 0..g.rows {
                    let gsum: f64 = g.row(i).iter().sum();
                    for (j, out) in ga.data[i * g.cols..(i + 1) * g.cols].iter_mut().enumerate() {
                        *out -= y.get(i, j).exp() * gsum;
                    }
                }
                send(*a, ga);
            }
            Op::Pick(a, idx) => {
                let x = val(*a);
                let mut ga = Matrix::zeros(x.rows, x.cols);
                for (i, &c) in idx.iter().enumerate() {
                    ga.data[i * x.cols + c] = g.data[i];
                }
                send(*a, ga);
            }
            Op::SumRows(a) => {
                let x = val(*a);
                let mut ga = Matrix::zeros(x.rows, x.cols);
                for i in 0..x.rows {
                    ga.data[i * x.cols..(i + 1) * x.cols].iter_mut().for_each(|v| *v = g.data[i]);
                }
                send(*a, ga);
            }
            Op::SumAll(a) => {
                let x = val(*a);
                send(*a, Matrix { rows: x.rows, cols: x.cols, data: vec![g.data[0]; x.data.len()] });
            }
        }
    }
}
