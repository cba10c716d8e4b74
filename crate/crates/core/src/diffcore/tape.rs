// SPDX-License-Identifier: Apache-2.0

//! Reverse-mode gradient tape over [`Tensor2`] values.
//!
//! A tape is built fresh for every forward pass. Each operation appends a
//! node holding its value and the indices of its operands; because operands
//! always precede their consumers, a single reverse sweep over the node list
//! visits the graph in reverse topological order.

use std::sync::atomic::{AtomicUsize, Ordering};

use super::special::{digamma_raw, ln_gamma_raw, trigamma_raw};
use super::tensor::Tensor2;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    AddCol(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Square(usize),
    Recip(usize),
    Digamma(usize),
    LnGamma(usize),
    Clamp(usize, f64, f64),
    SumCols(usize),
    SumRows(usize),
    Sum(usize),
    Transpose(usize),
    ConcatCols(Vec<usize>),
    SelectRows(usize, Vec<usize>),
    Gather(usize, Vec<usize>),
    LogSoftmax(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
}

#[derive(Debug)]
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &Tensor2, b: &Tensor2) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        })
    }
}

fn shape_err(op: &'static str, a: &Tensor2, b: &Tensor2) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape == self.id && v.index < self.nodes.len() {
            Ok(v.index)
        } else {
            Err(Error::ForeignVar)
        }
    }

    fn val(&self, i: usize) -> &Tensor2 {
        &self.nodes[i].value
    }

    fn push(&mut self, name: &'static str, value: Tensor2, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor2) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor2::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.val(ia).matmul(self.val(ib))?;
        self.push("matmul", out, Op::MatMul(ia, ib))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        same_shape(name, self.val(ia), self.val(ib))?;
        let out = self.val(ia).zip_map(self.val(ib), f);
        self.push(name, out, op(ia, ib))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    /// `a + r` with the 1×m row `r` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (ia, ir) = (self.idx(a)?, self.idx(r)?);
        let (av, rv) = (self.val(ia), self.val(ir));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(shape_err("add_row", av, rv));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        self.push("add_row", out, Op::AddRow(ia, ir))
    }

    /// `a + c` with the n×1 column `c` broadcast over the columns of `a`.
    pub fn add_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (ia, ic) = (self.idx(a)?, self.idx(c)?);
        let (av, cv) = (self.val(ia), self.val(ic));
        if cv.cols() != 1 || cv.rows() != av.rows() {
            return Err(shape_err("add_col", av, cv));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            let c = cv.data()[r];
            out.row_mut(r).iter_mut().for_each(|o| *o += c);
        }
        self.push("add_col", out, Op::AddCol(ia, ic))
    }

    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (ia, ir) = (self.idx(a)?, self.idx(r)?);
        let (av, rv) = (self.val(ia), self.val(ir));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(shape_err("mul_row", av, rv));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o *= b;
            }
        }
        self.push("mul_row", out, Op::MulRow(ia, ir))
    }

    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (ia, ic) = (self.idx(a)?, self.idx(c)?);
        let (av, cv) = (self.val(ia), self.val(ic));
        if cv.cols() != 1 || cv.rows() != av.rows() {
            return Err(shape_err("mul_col", av, cv));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            let c = cv.data()[r];
            out.row_mut(r).iter_mut().for_each(|o| *o *= c);
        }
        self.push("mul_col", out, Op::MulCol(ia, ic))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.val(ia).map(|x| x * s);
        self.push("scale", out, Op::Scale(ia, s))
    }

    /// Adds a constant to every entry.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.val(ia).map(|x| x + c);
        self.push("offset", out, Op::Offset(ia))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: fn(usize) -> Op) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.val(ia).map(f);
        self.push(name, out, op(ia))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary("ln", a, f64::ln, Op::Ln)
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square)
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.unary("recip", a, |x| 1.0 / x, Op::Recip)
    }

    pub fn digamma(&mut self, a: Var) -> Result<Var> {
        self.unary("digamma", a, digamma_raw, Op::Digamma)
    }

    pub fn ln_gamma(&mut self, a: Var) -> Result<Var> {
        self.unary("ln_gamma", a, ln_gamma_raw, Op::LnGamma)
    }

    /// Clamps into `[lo, hi]`; gradient flows only where the input is inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.val(ia).map(|x| x.clamp(lo, hi));
        self.push("clamp", out, Op::Clamp(ia, lo, hi))
    }

    /// Row sums as an n×1 column.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let av = self.val(ia);
        let sums: Vec<f64> = av.iter_rows().map(|r| r.iter().sum()).collect();
        self.push("sum_cols", Tensor2::column_vector(&sums), Op::SumCols(ia))
    }

    /// Column sums as a 1×m row.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let av = self.val(ia);
        let mut sums = vec![0.0; av.cols()];
        for r in av.iter_rows() {
            for (s, v) in sums.iter_mut().zip(r) {
                *s += v;
            }
        }
        self.push("sum_rows", Tensor2::row_vector(&sums), Op::SumRows(ia))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.val(ia).sum();
        self.push("sum", Tensor2::scalar(s), Op::Sum(ia))
    }

    /// Mean of all entries as a 1×1 value.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).data().len();
        if n == 0 {
            return Err(Error::Empty("mean over zero entries"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.val(ia).transpose();
        self.push("transpose", out, Op::Transpose(ia))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let Some(&first) = idx.first() else {
            return Err(Error::Empty("concat_cols"));
        };
        let rows = self.val(first).rows();
        let mut cols = 0;
        for &i in &idx {
            if self.val(i).rows() != rows {
                return Err(shape_err("concat_cols", self.val(first), self.val(i)));
            }
            cols += self.val(i).cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &i in &idx {
                data.extend_from_slice(self.val(i).row(r));
            }
        }
        let out = Tensor2::from_vec(rows, cols, data)?;
        self.push("concat_cols", out, Op::ConcatCols(idx))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let n = self.val(ia).rows();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::InvalidLabel {
                label: bad,
                reason: "row index out of range",
            });
        }
        let out = self.val(ia).select_rows(rows);
        self.push("select_rows", out, Op::SelectRows(ia, rows.to_vec()))
    }

    /// Picks entry `cols[i]` from row `i`, giving an n×1 column.
    pub fn gather(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let av = self.val(ia);
        if cols.len() != av.rows() {
            return Err(Error::ShapeMismatch {
                op: "gather",
                left: av.shape(),
                right: (cols.len(), 1),
            });
        }
        let mut out = Vec::with_capacity(cols.len());
        for (r, &c) in cols.iter().enumerate() {
            if c >= av.cols() {
                return Err(Error::InvalidLabel {
                    label: c,
                    reason: "column index out of range",
                });
            }
            out.push(av.get(r, c));
        }
        self.push("gather", Tensor2::column_vector(&out), Op::Gather(ia, cols.to_vec()))
    }

    /// Row-wise log-softmax with max shift.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let mut out = self.val(ia).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push("log_softmax", out, Op::LogSoftmax(ia))
    }

    /// Accumulates ∂output/∂v for every recorded node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.idx(output)?;
        let shape = self.val(out).shape();
        if shape != (1, 1) {
            return Err(Error::NonScalarOutput {
                rows: shape.0,
                cols: shape.1,
            });
        }
        let mut adj: Vec<Option<Tensor2>> = vec![None; self.nodes.len()];
        adj[out] = Some(Tensor2::scalar(1.0));

        for i in (0..=out).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            adjoints: adj,
        })
    }

    fn propagate(&self, i: usize, g: &Tensor2, adj: &mut [Option<Tensor2>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(adj, *a, g.matmul_t(self.val(*b)));
                accumulate(adj, *b, self.val(*a).t_matmul(g));
            }
            Op::Add(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                accumulate(adj, *a, g.zip_map(self.val(*b), |g, b| g * b));
                accumulate(adj, *b, g.zip_map(self.val(*a), |g, a| g * a));
            }
            Op::Div(a, b) => {
                let bv = self.val(*b);
                accumulate(adj, *a, g.zip_map(bv, |g, b| g / b));
                let gb = g.zip_map(y, |g, y| g * y).zip_map(bv, |gy, b| -gy / b);
                accumulate(adj, *b, gb);
            }
            Op::AddRow(a, r) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *r, column_sums(g));
            }
            Op::AddCol(a, c) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *c, row_sums(g));
            }
            Op::MulRow(a, r) => {
                let (av, rv) = (self.val(*a), self.val(*r));
                let mut ga = g.clone();
                for row in 0..ga.rows() {
                    for (o, s) in ga.row_mut(row).iter_mut().zip(rv.data()) {
                        *o *= s;
                    }
                }
                accumulate(adj, *a, ga);
                accumulate(adj, *r, column_sums(&g.zip_map(av, |g, a| g * a)));
            }
            Op::MulCol(a, c) => {
                let (av, cv) = (self.val(*a), self.val(*c));
                let mut ga = g.clone();
                for row in 0..ga.rows() {
                    let s = cv.data()[row];
                    ga.row_mut(row).iter_mut().for_each(|o| *o *= s);
                }
                accumulate(adj, *a, ga);
                accumulate(adj, *c, row_sums(&g.zip_map(av, |g, a| g * a)));
            }
            Op::Scale(a, s) => accumulate(adj, *a, g.map(|v| v * s)),
            Op::Offset(a) => accumulate(adj, *a, g.clone()),
            Op::Tanh(a) => accumulate(adj, *a, g.zip_map(y, |g, y| g * (1.0 - y * y))),
            Op::Relu(a) => {
                let x = self.val(*a);
                accumulate(adj, *a, g.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::Exp(a) => accumulate(adj, *a, g.zip_map(y, |g, y| g * y)),
            Op::Ln(a) => accumulate(adj, *a, g.zip_map(self.val(*a), |g, x| g / x)),
            Op::Sqrt(a) => accumulate(adj, *a, g.zip_map(y, |g, y| if y > 0.0 { g / (2.0 * y) } else { 0.0 })),
            Op::Square(a) => accumulate(adj, *a, g.zip_map(self.val(*a), |g, x| 2.0 * g * x)),
            Op::Recip(a) => accumulate(adj, *a, g.zip_map(y, |g, y| -g * y * y)),
            Op::Digamma(a) => accumulate(adj, *a, g.zip_map(self.val(*a), |g, x| g * trigamma_raw(x))),
            Op::LnGamma(a) => accumulate(adj, *a, g.zip_map(self.val(*a), |g, x| g * digamma_raw(x))),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let ga = g.zip_map(self.val(*a), |g, x| if x >= lo && x <= hi { g } else { 0.0 });
                accumulate(adj, *a, ga);
            }
            Op::SumCols(a) => {
                let av = self.val(*a);
                let mut ga = Tensor2::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let s = g.data()[r];
                    ga.row_mut(r).iter_mut().for_each(|o| *o = s);
                }
                accumulate(adj, *a, ga);
            }
            Op::SumRows(a) => {
                let av = self.val(*a);
                let mut ga = Tensor2::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    ga.row_mut(r).copy_from_slice(g.data());
                }
                accumulate(adj, *a, ga);
            }
            Op::Sum(a) => {
                let av = self.val(*a);
                accumulate(adj, *a, Tensor2::filled(av.rows(), av.cols(), g.item()));
            }
            Op::Transpose(a) => accumulate(adj, *a, g.transpose()),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.val(p);
                    let w = pv.cols();
                    let mut gp = Tensor2::zeros(pv.rows(), w);
                    for r in 0..pv.rows() {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    accumulate(adj, p, gp);
                    offset += w;
                }
            }
            Op::SelectRows(a, rows) => {
                let av = self.val(*a);
                let mut ga = Tensor2::zeros(av.rows(), av.cols());
                for (k, &r) in rows.iter().enumerate() {
                    for (o, v) in ga.row_mut(r).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                accumulate(adj, *a, ga);
            }
            Op::Gather(a, cols) => {
                let av = self.val(*a);
                let mut ga = Tensor2::zeros(av.rows(), av.cols());
                for (r, &c) in cols.iter().enumerate() {
                    ga.set(r, c, g.data()[r]);
                }
                accumulate(adj, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let mut ga = g.clone();
                for r in 0..ga.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for (o, &ly) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                        *o -= ly.exp() * gsum;
                    }
                }
                accumulate(adj, *a, ga);
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Tensor2>], i: usize, g: Tensor2) {
    match &mut adj[i] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Tensor2) -> Tensor2 {
    let mut sums = vec![0.0; g.cols()];
    for r in g.iter_rows() {
        for (s, v) in sums.iter_mut().zip(r) {
            *s += v;
        }
    }
    Tensor2::row_vector(&sums)
}

fn row_sums(g: &Tensor2) -> Tensor2 {
    let sums: Vec<f64> = g.iter_rows().map(|r| r.iter().sum()).collect();
    Tensor2::column_vector(&sums)
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: usize,
    adjoints: Vec<Option<Tensor2>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not influence
    /// the output.
    pub fn get(&self, v: Var) -> Option<&Tensor2> {
        if v.tape != self.tape {
            return None;
        }
        self.adjoints.get(v.index).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`, zero-filled to `like`'s shape when `v`
    /// does not influence the output.
    pub fn wrt(&self, v: Var, like: &Tensor2) -> Tensor2 {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor2::zeros(like.rows(), like.cols()))
    }
}
