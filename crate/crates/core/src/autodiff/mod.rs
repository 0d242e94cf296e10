//! Reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! Every primitive appends one node to a [`Graph`] (the tape). Nodes are
//! stored in creation order, so the tape is always topologically sorted and
//! [`Graph::backward`] is a single reverse sweep over it.
//!
//! Parameters live outside the graph (as [`Matrix`] values in the networks);
//! a training step registers them as leaves on a fresh graph, builds the
//! loss, runs the backward sweep and reads the leaf gradients back out.

pub mod check;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Handle to a node on a [`Graph`]. Cheap to copy; only meaningful for the
/// graph that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tensor {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Tensor {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Log,
    Exp,
    Neg,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Unary(Unary, usize),
    ClampedLog(usize, f64),
    ClampMin(usize, f64),
    Recip(usize),
    SoftmaxRows(usize),
    ConcatCols(usize, usize),
    RowL2Norm(usize),
    RowScale(usize, usize),
    RowOuter(usize, usize),
    Detach,
    GradReverse(usize, f64),
    Sum(usize),
    Mean(usize),
    SelectCols(usize, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

/// The tape: an append-only list of recorded operations.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Tensor {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a leaf that never receives gradient.
    pub fn constant(&mut self, value: Matrix) -> Tensor {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, t: Tensor) -> &Matrix {
        &self.nodes[t.id].value
    }

    /// Accumulated gradient of `t`, or zeros if nothing has reached it.
    pub fn grad(&self, t: Tensor) -> Matrix {
        match &self.nodes[t.id].grad {
            Some(g) => g.clone(),
            None => Matrix::zeros(t.rows, t.cols),
        }
    }

    pub fn has_grad(&self, t: Tensor) -> bool {
        self.nodes[t.id].grad.is_some()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Tensor {
        let (rows, cols) = value.shape();
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Tensor {
            id: self.nodes.len() - 1,
            rows,
            cols,
        }
    }

    fn needs(&self, t: Tensor) -> bool {
        self.nodes[t.id].requires_grad
    }

    fn same_shape(op: &'static str, a: Tensor, b: Tensor) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::Shape {
                op,
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        Ok(())
    }

    fn same_rows(op: &'static str, a: Tensor, b: Tensor) -> Result<()> {
        if a.rows != b.rows {
            return Err(Error::Shape {
                op,
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatMul(a.id, b.id), rg))
    }

    /// Adds a `1×n` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Tensor, bias: Tensor) -> Result<Tensor> {
        if bias.rows != 1 || bias.cols != x.cols {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: x.shape(),
                rhs: bias.shape(),
            });
        }
        let mut v = self.value(x).clone();
        let b = self.value(bias).as_slice().to_vec();
        for r in 0..v.rows() {
            for (o, bb) in v.row_mut(r).iter_mut().zip(&b) {
                *o += bb;
            }
        }
        let rg = self.needs(x) || self.needs(bias);
        Ok(self.push(v, Op::AddBias(x.id, bias.id), rg))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        Self::same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a.id, b.id), rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        Self::same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul(a.id, b.id), rg))
    }

    pub fn scale(&mut self, x: Tensor, c: f64) -> Tensor {
        let v = self.value(x).map(|a| a * c);
        let rg = self.needs(x);
        self.push(v, Op::Scale(x.id, c), rg)
    }

    pub fn add_scalar(&mut self, x: Tensor, c: f64) -> Tensor {
        let v = self.value(x).map(|a| a + c);
        let rg = self.needs(x);
        self.push(v, Op::AddScalar(x.id), rg)
    }

    pub fn elementwise(&mut self, kind: Unary, x: Tensor) -> Result<Tensor> {
        let xv = self.value(x);
        if kind == Unary::Log {
            if let Some((i, &bad)) = xv.as_slice().iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
                return Err(Error::Domain {
                    op: "log",
                    index: i,
                    value: bad,
                });
            }
        }
        let v = match kind {
            Unary::Relu => xv.map(|a| if a > 0.0 { a } else { 0.0 }),
            Unary::Sigmoid => xv.map(sigmoid),
            Unary::Log => xv.map(f64::ln),
            Unary::Exp => xv.map(f64::exp),
            Unary::Neg => xv.map(|a| -a),
        };
        let rg = self.needs(x);
        Ok(self.push(v, Op::Unary(kind, x.id), rg))
    }

    pub fn relu(&mut self, x: Tensor) -> Tensor {
        self.elementwise(Unary::Relu, x).expect("relu is total")
    }

    pub fn sigmoid(&mut self, x: Tensor) -> Tensor {
        self.elementwise(Unary::Sigmoid, x).expect("sigmoid is total")
    }

    pub fn log(&mut self, x: Tensor) -> Result<Tensor> {
        self.elementwise(Unary::Log, x)
    }

    pub fn exp(&mut self, x: Tensor) -> Tensor {
        self.elementwise(Unary::Exp, x).expect("exp is total")
    }

    pub fn neg(&mut self, x: Tensor) -> Tensor {
        self.elementwise(Unary::Neg, x).expect("neg is total")
    }

    /// `ln(max(x, floor))`. The gradient is zero wherever the clamp is active.
    pub fn clamped_log(&mut self, x: Tensor, floor: f64) -> Tensor {
        let v = self.value(x).map(|a| a.max(floor).ln());
        let rg = self.needs(x);
        self.push(v, Op::ClampedLog(x.id, floor), rg)
    }

    pub fn clamp_min(&mut self, x: Tensor, floor: f64) -> Tensor {
        let v = self.value(x).map(|a| a.max(floor));
        let rg = self.needs(x);
        self.push(v, Op::ClampMin(x.id, floor), rg)
    }

    pub fn recip(&mut self, x: Tensor) -> Result<Tensor> {
        let xv = self.value(x);
        if let Some((i, &bad)) = xv.as_slice().iter().enumerate().find(|(_, v)| **v == 0.0) {
            return Err(Error::Domain {
                op: "recip",
                index: i,
                value: bad,
            });
        }
        let v = xv.map(|a| 1.0 / a);
        let rg = self.needs(x);
        Ok(self.push(v, Op::Recip(x.id), rg))
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Tensor) -> Result<Tensor> {
        let xv = self.value(x);
        if let Some((i, &bad)) = xv.as_slice().iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Domain {
                op: "softmax_rows",
                index: i,
                value: bad,
            });
        }
        let mut v = xv.clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                total += *e;
            }
            for e in row.iter_mut() {
                *e /= total;
            }
        }
        let rg = self.needs(x);
        Ok(self.push(v, Op::SoftmaxRows(x.id), rg))
    }

    pub fn concat_cols(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        Self::same_rows("concat_cols", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let cols = a.cols + b.cols;
        let mut data = Vec::with_capacity(a.rows * cols);
        for r in 0..a.rows {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let v = Matrix::from_vec(a.rows, cols, data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::ConcatCols(a.id, b.id), rg))
    }

    /// Euclidean norm of each row, as a `b×1` column.
    pub fn row_l2_norm(&mut self, x: Tensor) -> Tensor {
        let norms = self.value(x).row_norms();
        let v = Matrix::from_vec(x.rows, 1, norms).expect("one norm per row");
        let rg = self.needs(x);
        self.push(v, Op::RowL2Norm(x.id), rg)
    }

    /// Multiplies row `i` of `x` by `s[i]`.
    pub fn row_scale(&mut self, x: Tensor, s: Tensor) -> Result<Tensor> {
        if s.cols != 1 || s.rows != x.rows {
            return Err(Error::Shape {
                op: "row_scale",
                lhs: x.shape(),
                rhs: s.shape(),
            });
        }
        let mut v = self.value(x).clone();
        let sv = self.value(s).as_slice().to_vec();
        for (r, &k) in sv.iter().enumerate() {
            for e in v.row_mut(r) {
                *e *= k;
            }
        }
        let rg = self.needs(x) || self.needs(s);
        Ok(self.push(v, Op::RowScale(x.id, s.id), rg))
    }

    /// Per-row flattened outer product: row `i` of the output holds
    /// `f[i, a] * p[i, e]` at column `a * p.cols + e`.
    pub fn row_outer(&mut self, f: Tensor, p: Tensor) -> Result<Tensor> {
        Self::same_rows("row_outer", f, p)?;
        let (fv, pv) = (self.value(f), self.value(p));
        let width = f.cols * p.cols;
        let mut data = Vec::with_capacity(f.rows * width);
        for r in 0..f.rows {
            for &a in fv.row(r) {
                data.extend(pv.row(r).iter().map(|&e| a * e));
            }
        }
        let v = Matrix::from_vec(f.rows, width, data)?;
        let rg = self.needs(f) || self.needs(p);
        Ok(self.push(v, Op::RowOuter(f.id, p.id), rg))
    }

    /// Identity forward; cuts every gradient path through this node.
    pub fn detach(&mut self, x: Tensor) -> Tensor {
        let v = self.value(x).clone();
        self.push(v, Op::Detach, false)
    }

    /// Identity forward; backward multiplies the upstream gradient by `-lambda`.
    pub fn grad_reverse(&mut self, x: Tensor, lambda: f64) -> Result<Tensor> {
        if !(lambda >= 0.0) {
            return Err(Error::Contract(format!(
                "grad_reverse needs lambda >= 0, got {lambda}"
            )));
        }
        let v = self.value(x).clone();
        let rg = self.needs(x);
        Ok(self.push(v, Op::GradReverse(x.id, lambda), rg))
    }

    pub fn sum(&mut self, x: Tensor) -> Tensor {
        let v = Matrix::filled(1, 1, self.value(x).sum());
        let rg = self.needs(x);
        self.push(v, Op::Sum(x.id), rg)
    }

    pub fn mean(&mut self, x: Tensor) -> Result<Tensor> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let v = Matrix::filled(1, 1, xv.sum() / xv.len() as f64);
        let rg = self.needs(x);
        Ok(self.push(v, Op::Mean(x.id), rg))
    }

    /// Picks `x[i, idx[i]]` from each row, as a `b×1` column.
    pub fn select_cols(&mut self, x: Tensor, idx: &[usize]) -> Result<Tensor> {
        if idx.len() != x.rows {
            return Err(Error::Shape {
                op: "select_cols",
                lhs: x.shape(),
                rhs: (idx.len(), 1),
            });
        }
        if let Some((i, &bad)) = idx.iter().enumerate().find(|(_, &j)| j >= x.cols) {
            return Err(Error::Data(format!(
                "select_cols: index {bad} at row {i} out of range for {} columns",
                x.cols
            )));
        }
        let xv = self.value(x);
        let data = idx.iter().enumerate().map(|(r, &j)| xv.get(r, j)).collect();
        let v = Matrix::from_vec(x.rows, 1, data)?;
        let rg = self.needs(x);
        Ok(self.push(v, Op::SelectCols(x.id, idx.to_vec()), rg))
    }

    /// Back-propagates from a `1×1` loss. Gradients add onto whatever earlier
    /// calls left behind; call [`Graph::zero_grads`] to start over.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if loss.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {:?}",
                loss.shape()
            )));
        }
        let mut pass: Vec<Option<Matrix>> = vec![None; loss.id + 1];
        pass[loss.id] = Some(Matrix::filled(1, 1, 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = pass[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut pass)?;
            match &mut self.nodes[id].grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Matrix, pass: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[id];
        let out = &node.value;
        let val = |i: usize| &self.nodes[i].value;
        let mut send = |i: usize, contribution: Matrix| {
            if !self.nodes[i].requires_grad {
                return;
            }
            match &mut pass[i] {
                Some(acc) => acc.add_assign(&contribution),
                slot @ None => *slot = Some(contribution),
            }
        };

        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul(a, b) => {
                send(*a, g.matmul_t(val(*b))?);
                send(*b, val(*a).t_matmul(g)?);
            }
            Op::AddBias(x, bias) => {
                send(*x, g.clone());
                let mut col = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (c, v) in col.as_mut_slice().iter_mut().zip(g.row(r)) {
                        *c += v;
                    }
                }
                send(*bias, col);
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Mul(a, b) => {
                send(*a, g.zip_map(val(*b), |u, v| u * v));
                send(*b, g.zip_map(val(*a), |u, v| u * v));
            }
            Op::Scale(x, c) => send(*x, g.map(|u| u * c)),
            Op::AddScalar(x) => send(*x, g.clone()),
            Op::Unary(kind, x) => {
                let d = match kind {
                    Unary::Relu => g.zip_map(val(*x), |u, v| if v > 0.0 { u } else { 0.0 }),
                    Unary::Sigmoid => g.zip_map(out, |u, y| u * y * (1.0 - y)),
                    Unary::Log => g.zip_map(val(*x), |u, v| u / v),
                    Unary::Exp => g.zip_map(out, |u, y| u * y),
                    Unary::Neg => g.map(|u| -u),
                };
                send(*x, d);
            }
            Op::ClampedLog(x, floor) => {
                send(*x, g.zip_map(val(*x), |u, v| if v > *floor { u / v } else { 0.0 }));
            }
            Op::ClampMin(x, floor) => {
                send(*x, g.zip_map(val(*x), |u, v| if v > *floor { u } else { 0.0 }));
            }
            Op::Recip(x) => send(*x, g.zip_map(out, |u, y| -u * y * y)),
            Op::SoftmaxRows(x) => {
                let mut d = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yy), &gg) in d.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *o = yy * (gg - dot);
                    }
                }
                send(*x, d);
            }
            Op::ConcatCols(a, b) => {
                let left = val(*a).cols();
                let right = val(*b).cols();
                let mut ga = Matrix::zeros(g.rows(), left);
                let mut gb = Matrix::zeros(g.rows(), right);
                for r in 0..g.rows() {
                    ga.row_mut(r).copy_from_slice(&g.row(r)[..left]);
                    gb.row_mut(r).copy_from_slice(&g.row(r)[left..]);
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::RowL2Norm(x) => {
                let xv = val(*x);
                let mut d = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let n = out.get(r, 0);
                    if n == 0.0 {
                        continue;
                    }
                    let k = g.get(r, 0) / n;
                    for (o, &v) in d.row_mut(r).iter_mut().zip(xv.row(r)) {
                        *o = k * v;
                    }
                }
                send(*x, d);
            }
            Op::RowScale(x, s) => {
                let (xv, sv) = (val(*x), val(*s));
                let mut gx = g.clone();
                let mut gs = Matrix::zeros(sv.rows(), 1);
                for r in 0..xv.rows() {
                    let k = sv.get(r, 0);
                    for e in gx.row_mut(r) {
                        *e *= k;
                    }
                    gs.set(r, 0, g.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum());
                }
                send(*x, gx);
                send(*s, gs);
            }
            Op::RowOuter(f, p) => {
                let (fv, pv) = (val(*f), val(*p));
                let c = pv.cols();
                let mut gf = Matrix::zeros(fv.rows(), fv.cols());
                let mut gp = Matrix::zeros(pv.rows(), c);
                for r in 0..fv.rows() {
                    let gr = g.row(r);
                    let (fr, pr) = (fv.row(r), pv.row(r));
                    for (a, &fa) in fr.iter().enumerate() {
                        let block = &gr[a * c..(a + 1) * c];
                        let mut acc = 0.0;
                        for (e, &ge) in block.iter().enumerate() {
                            acc += ge * pr[e];
                            gp.row_mut(r)[e] += ge * fa;
                        }
                        gf.set(r, a, acc);
                    }
                }
                send(*f, gf);
                send(*p, gp);
            }
            Op::GradReverse(x, lambda) => send(*x, g.map(|u| -lambda * u)),
            Op::Sum(x) => {
                let (r, c) = val(*x).shape();
                send(*x, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::Mean(x) => {
                let (r, c) = val(*x).shape();
                send(*x, Matrix::filled(r, c, g.get(0, 0) / (r * c) as f64));
            }
            Op::SelectCols(x, idx) => {
                let (r, c) = val(*x).shape();
                let mut d = Matrix::zeros(r, c);
                for (row, &j) in idx.iter().enumerate() {
                    d.set(row, j, g.get(row, 0));
                }
                send(*x, d);
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
