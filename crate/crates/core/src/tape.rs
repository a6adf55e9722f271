//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! Every operation appends a node holding its forward value and the
//! indices of its operands. [`GradientTape::backward`] then walks the
//! nodes from last to first, so each node's adjoint is complete before it
//! is propagated to its operands. Adjoints of a node used several times
//! accumulate additively.
//!
//! ```
//! use osdr::tape::GradientTape;
//! use osdr::Matrix;
//!
//! let mut tape = GradientTape::new();
//! let x = tape.param(Matrix::row_vector(&[1.0, 2.0]).unwrap());
//! let sq = tape.hadamard(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).as_slice(), &[2.0, 4.0]);
//! ```

use crate::error::{usage, Error, Result};
use crate::tensor::{softmax_into, Matrix, NORM_EPS};

/// Handle to a node recorded on a [`GradientTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    LeakyRelu(Var, f64),
    SoftmaxRows(Var),
    MaskedSoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Ln(Var),
    Sum(Var),
    Mean(Var),
    RowSums(Var),
    SelectRows(Var, Vec<usize>),
    SelectCols(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    NormalizeRows(Var),
    RowNorms(Var),
    PairwiseSqDist(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct GradientTape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

/// Adjoints produced by [`GradientTape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
    visit_order: Vec<Var>,
}

impl Gradients {
    /// Gradient with respect to `v`; a zero matrix of matching shape when
    /// the loss does not depend on it.
    pub fn get(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Nodes in the order their adjoints were propagated.
    pub fn visit_order(&self) -> &[Var] {
        &self.visit_order
    }
}

impl GradientTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable parameter.
    pub fn param(&mut self, value: Matrix) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push(v);
        v
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, a: Var, value: Matrix, op: Op) -> Var {
        let rg = self.needs(&[a]);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.unary(a, value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Hadamard(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.unary(a, value, Op::Scale(a, s))
    }

    /// Adds the `1 x k` row `row` to every row of the `n x k` matrix `m`.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (mv, rv) = (self.value(m), self.value(row));
        if rv.rows() != 1 || rv.cols() != mv.cols() {
            return Err(Error::Dimension {
                op: "add_row",
                left: mv.shape(),
                right: rv.shape(),
            });
        }
        let mut value = mv.clone();
        for r in 0..value.rows() {
            for (o, &b) in value.row_mut(r).iter_mut().zip(rv.as_slice()) {
                *o += b;
            }
        }
        let rg = self.needs(&[m, row]);
        Ok(self.push(value, Op::AddRow(m, row), rg))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        self.unary(a, value, Op::LeakyRelu(a, slope))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = crate::tensor::softmax_rows(self.value(a));
        self.unary(a, value, Op::SoftmaxRows(a))
    }

    /// Softmax of each row restricted to the entries where `mask` is set;
    /// masked-out entries are exactly zero. Every row needs at least one
    /// set entry.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let value = masked_softmax(self.value(a), mask)?;
        Ok(self.unary(a, value, Op::MaskedSoftmaxRows(a)))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = src.clone();
        for r in 0..src.rows() {
            let row = src.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for o in value.row_mut(r) {
                *o -= lse;
            }
        }
        self.unary(a, value, Op::LogSoftmaxRows(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.unary(a, value, Op::Ln(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.unary(a, value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).mean());
        self.unary(a, value, Op::Mean(a))
    }

    /// `n x 1` column of row sums.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let sums: Vec<f64> = src.row_iter().map(|r| r.iter().sum()).collect();
        let value = Matrix::raw(src.rows(), 1, sums);
        self.unary(a, value, Op::RowSums(a))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(a).select_rows(idx)?;
        Ok(self.unary(a, value, Op::SelectRows(a, idx.to_vec())))
    }

    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(a).select_cols(idx)?;
        Ok(self.unary(a, value, Op::SelectCols(a, idx.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_cols(&mats)?;
        let rg = self.needs(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Scales each row to unit L2 norm; rows with norm below
    /// [`NORM_EPS`] become zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = src.clone();
        for r in 0..src.rows() {
            let n = crate::tensor::norm(src.row(r));
            let row = value.row_mut(r);
            if n < NORM_EPS {
                row.fill(0.0);
            } else {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        self.unary(a, value, Op::NormalizeRows(a))
    }

    /// `n x 1` column of row L2 norms.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let norms: Vec<f64> = src.row_iter().map(crate::tensor::norm).collect();
        let value = Matrix::raw(src.rows(), 1, norms);
        self.unary(a, value, Op::RowNorms(a))
    }

    /// `n x n` matrix of squared distances between the rows of `a`.
    pub fn pairwise_sq_dist(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let n = src.rows();
        let mut value = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                value.set(i, j, crate::tensor::squared_distance(src.row(i), src.row(j)));
            }
        }
        self.unary(a, value, Op::PairwiseSqDist(a))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(usage(format!(
                "backward needs a scalar loss, got a {}x{} matrix",
                lv.rows(),
                lv.cols()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut visit_order = Vec::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visit_order.push(Var(i));
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            visit_order,
        })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let mut acc = |v: Var, delta: Matrix| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.axpy(1.0, &delta),
                slot @ None => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.matmul(&val(*b).transpose())?)?;
                acc(*b, val(*a).transpose().matmul(g)?)?;
            }
            Op::Transpose(a) => acc(*a, g.transpose())?,
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::Hadamard(a, b) => {
                acc(*a, g.hadamard(val(*b))?)?;
                acc(*b, g.hadamard(val(*a))?)?;
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s))?,
            Op::AddRow(m, row) => {
                acc(*m, g.clone())?;
                let mut col_sums = vec![0.0; g.cols()];
                for r in g.row_iter() {
                    for (c, &v) in col_sums.iter_mut().zip(r) {
                        *c += v;
                    }
                }
                acc(*row, Matrix::raw(1, g.cols(), col_sums))?;
            }
            Op::LeakyRelu(a, slope) => {
                let x = val(*a);
                let data = g
                    .as_slice()
                    .iter()
                    .zip(x.as_slice())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { slope * gv })
                    .collect();
                acc(*a, Matrix::raw(g.rows(), g.cols(), data))?;
            }
            Op::SoftmaxRows(a) | Op::MaskedSoftmaxRows(a) => {
                let y = &node.value;
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((o, &p), &q) in out.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = p * (q - inner);
                    }
                }
                acc(*a, out)?;
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut out = g.clone();
                for r in 0..y.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for (o, &ly) in out.row_mut(r).iter_mut().zip(y.row(r)) {
                        *o -= ly.exp() * gsum;
                    }
                }
                acc(*a, out)?;
            }
            Op::Ln(a) => acc(*a, g.zip_div(val(*a)))?,
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::filled(r, c, g.as_slice()[0]))?;
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::filled(r, c, g.as_slice()[0] / (r * c) as f64))?;
            }
            Op::RowSums(a) => {
                let (r, c) = val(*a).shape();
                let mut out = Matrix::zeros(r, c);
                for i in 0..r {
                    out.row_mut(i).fill(g.as_slice()[i]);
                }
                acc(*a, out)?;
            }
            Op::SelectRows(a, idx) => {
                let (r, c) = val(*a).shape();
                let mut out = Matrix::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for (o, &v) in out.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                acc(*a, out)?;
            }
            Op::SelectCols(a, idx) => {
                let (r, c) = val(*a).shape();
                let mut out = Matrix::zeros(r, c);
                for i in 0..r {
                    let grow = g.row(i);
                    let orow = out.row_mut(i);
                    for (k, &j) in idx.iter().enumerate() {
                        orow[j] += grow[k];
                    }
                }
                acc(*a, out)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = val(p).cols();
                    let idx: Vec<usize> = (offset..offset + cols).collect();
                    acc(p, g.select_cols(&idx)?)?;
                    offset += cols;
                }
            }
            Op::NormalizeRows(a) => {
                let x = val(*a);
                let y = &node.value;
                let mut out = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = crate::tensor::norm(x.row(r));
                    if n < NORM_EPS {
                        continue;
                    }
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((o, &p), &q) in out.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = (q - p * inner) / n;
                    }
                }
                acc(*a, out)?;
            }
            Op::RowNorms(a) => {
                let x = val(*a);
                let norms = &node.value;
                let mut out = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = norms.as_slice()[r];
                    if n < NORM_EPS {
                        continue;
                    }
                    let s = g.as_slice()[r] / n;
                    for (o, &v) in out.row_mut(r).iter_mut().zip(x.row(r)) {
                        *o = s * v;
                    }
                }
                acc(*a, out)?;
            }
            Op::PairwiseSqDist(a) => {
                let x = val(*a);
                let n = x.rows();
                let mut out = Matrix::zeros(n, x.cols());
                for i in 0..n {
                    for j in 0..n {
                        let w = 2.0 * (g.get(i, j) + g.get(j, i));
                        if w == 0.0 {
                            continue;
                        }
                        for k in 0..x.cols() {
                            let d = x.get(i, k) - x.get(j, k);
                            out.row_mut(i)[k] += w * d;
                        }
                    }
                }
                acc(*a, out)?;
            }
        }
        Ok(())
    }
}

impl Matrix {
    fn zip_div(&self, denom: &Matrix) -> Matrix {
        let data = self.as_slice().iter().zip(denom.as_slice()).map(|(a, b)| a / b).collect();
        Matrix::raw(self.rows(), self.cols(), data)
    }
}

pub(crate) fn masked_softmax(src: &Matrix, mask: &[bool]) -> Result<Matrix> {
    if mask.len() != src.len() {
        return Err(Error::Dimension {
            op: "masked_softmax_rows",
            left: src.shape(),
            right: (mask.len(), 1),
        });
    }
    let cols = src.cols();
    let mut value = Matrix::zeros(src.rows(), cols);
    let mut kept = Vec::with_capacity(cols);
    let mut probs = Vec::with_capacity(cols);
    for r in 0..src.rows() {
        let row_mask = &mask[r * cols..(r + 1) * cols];
        kept.clear();
        kept.extend(src.row(r).iter().zip(row_mask).filter(|(_, &m)| m).map(|(&v, _)| v));
        if kept.is_empty() {
            return Err(usage(format!("masked softmax row {r} has no unmasked entries")));
        }
        probs.resize(kept.len(), 0.0);
        softmax_into(&kept, &mut probs);
        let out = value.row_mut(r);
        let mut k = 0;
        for (o, &m) in out.iter_mut().zip(row_mask) {
            if m {
                *o = probs[k];
                k += 1;
            }
        }
    }
    Ok(value)
}
