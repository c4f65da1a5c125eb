//! Reverse-mode tape over dense row-major matrices.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the node list once in reverse and accumulates adjoints. Nodes that
//! do not depend on any gradient-requiring leaf are skipped.

use std::sync::atomic::{AtomicU64, Ordering};

use super::DiffError;

/// Probability floor applied inside logarithms of probabilities.
pub const EPS_PROB: f64 = 1e-12;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a matrix value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Matrix {
    tape: u64,
    id: usize,
    rows: usize,
    cols: usize,
}

impl Matrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Sigmoid(usize),
    Tanh(usize),
    Softplus(usize),
    Exp(usize),
    LnClamped(usize),
    SoftmaxRows(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    Sum(usize),
    NegLogPick(usize, usize),
    SoftCrossEntropy(usize, Vec<f64>),
    SquaredDiff(usize, usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    needs_grad: bool,
}

/// Append-only computation graph with adjoint storage.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    backward_done: bool,
    clamp_count: usize,
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
            grads: Vec::new(),
            backward_done: false,
            clamp_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of times a probability was clamped at [`EPS_PROB`] inside a log.
    pub fn clamp_count(&self) -> usize {
        self.clamp_count
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Matrix, DiffError> {
        self.leaf(rows, cols, values, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Matrix, DiffError> {
        self.leaf(rows, cols, values, false)
    }

    pub fn row(&mut self, values: &[f64]) -> Result<Matrix, DiffError> {
        self.constant(1, values.len(), values.to_vec())
    }

    pub fn scalar(&mut self, value: f64) -> Result<Matrix, DiffError> {
        self.constant(1, 1, vec![value])
    }

    pub fn leaf(
        &mut self,
        rows: usize,
        cols: usize,
        values: Vec<f64>,
        needs_grad: bool,
    ) -> Result<Matrix, DiffError> {
        if rows * cols != values.len() {
            return Err(DiffError::Shape {
                op: "leaf",
                lhs: (rows, cols),
                rhs: (values.len(), 1),
            });
        }
        self.push(Op::Leaf, rows, cols, values, needs_grad, "leaf")
    }

    pub fn value(&self, m: Matrix) -> &[f64] {
        debug_assert_eq!(m.tape, self.id);
        &self.nodes[m.id].value
    }

    pub fn scalar_value(&self, m: Matrix) -> f64 {
        self.value(m)[0]
    }

    /// Adjoint of `m` after [`Tape::backward`]; zeros when nothing flowed into it.
    pub fn grad(&self, m: Matrix) -> Vec<f64> {
        match self.grads.get(m.id) {
            Some(g) if !g.is_empty() => g.clone(),
            _ => vec![0.0; m.len()],
        }
    }

    /// True when a nonzero adjoint buffer was allocated for `m`.
    pub fn has_grad(&self, m: Matrix) -> bool {
        self.grads
            .get(m.id)
            .map(|g| g.iter().any(|v| *v != 0.0))
            .unwrap_or(false)
    }

    fn check(&self, m: Matrix) -> Result<(), DiffError> {
        if m.tape != self.id {
            return Err(DiffError::ForeignTape);
        }
        Ok(())
    }

    fn push(
        &mut self,
        op: Op,
        rows: usize,
        cols: usize,
        value: Vec<f64>,
        needs_grad: bool,
        name: &'static str,
    ) -> Result<Matrix, DiffError> {
        if self.backward_done {
            return Err(DiffError::BackwardTwice);
        }
        if value.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite { op: name });
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value,
            needs_grad,
        });
        Ok(Matrix {
            tape: self.id,
            id,
            rows,
            cols,
        })
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    fn same_shape(&self, op: &'static str, a: Matrix, b: Matrix) -> Result<(), DiffError> {
        self.check(a)?;
        self.check(b)?;
        if a.shape() != b.shape() {
            return Err(DiffError::Shape {
                op,
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Matrix, b: Matrix) -> Result<Matrix, DiffError> {
        self.check(a)?;
        self.check(b)?;
        if a.cols != b.rows {
            return Err(DiffError::Shape {
                op: "matmul",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let (r, k, c) = (a.rows, a.cols, b.cols);
        let av = &self.nodes[a.id].value;
        let bv = &self.nodes[b.id].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let orow = &mut out[i * c..(i + 1) * c];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * c..(p + 1) * c];
                for (o, y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let ng = self.needs(&[a.id, b.id]);
        self.push(Op::MatMul(a.id, b.id), r, c, out, ng, "matmul")
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Matrix, b: Matrix) -> Result<Matrix, DiffError> {
        self.check(a)?;
        self.check(b)?;
        if a.cols != b.cols {
            return Err(DiffError::Shape {
                op: "matmul_nt",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let (r, k, c) = (a.rows, a.cols, b.rows);
        let av = &self.nodes[a.id].value;
        let bv = &self.nodes[b.id].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..c {
                let brow = &bv[j * k..(j + 1) * k];
                out[i * c + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        let ng = self.needs(&[a.id, b.id]);
        self.push(Op::MatMulNT(a.id, b.id), r, c, out, ng, "matmul_nt")
    }

    pub fn add(&mut self, a: Matrix, b: Matrix) -> Result<Matrix, DiffError> {
        self.same_shape("add", a, b)?;
        let out = zip_map(&self.nodes[a.id].value, &self.nodes[b.id].value, |x, y| x + y);
        let ng = self.needs(&[a.id, b.id]);
        self.push(Op::Add(a.id, b.id), a.rows, a.cols, out, ng, "add")
    }

    /// Adds the row vector `b` to every row of `a`.
    pub fn add_row(&mut self, a: Matrix, b: Matrix) -> Result<Matrix, DiffError> {
        self.check(a)?;
        self.check(b)?;
        if b.rows != 1 || b.cols != a.cols {
            return Err(DiffError::Shape {
                op: "add_row",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let av = &self.nodes[a.id].value;
        let bv = &self.nodes[b.id].value;
        let out: Vec<f64> = av
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % a.cols])
            .collect();
        let ng = self.needs(&[a.id, b.id]);
        self.push(Op::AddRow(a.id, b.id), a.rows, a.cols, out, ng, "add_row")
    }

    pub fn sub(&mut self, a: Matrix, b: Matrix) -> Result<Matrix, DiffError> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(&self.nodes[a.id].value, &self.nodes[b.id].value, |x, y| x - y);
        let ng = self.needs(&[a.id, b.id]);
        self.push(Op::Sub(a.id, b.id), a.rows, a.cols, out, ng, "sub")
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Matrix, b: Matrix) -> Result<Matrix, DiffError> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(&self.nodes[a.id].value, &self.nodes[b.id].value, |x, y| x * y);
        let ng = self.needs(&[a.id, b.id]);
        self.push(Op::Mul(a.id, b.id), a.rows, a.cols, out, ng, "mul")
    }

    pub fn scale(&mut self, a: Matrix, k: f64) -> Result<Matrix, DiffError> {
        self.check(a)?;
        let out = self.nodes[a.id].value.iter().map(|x| x * k).collect();
        let ng = self.needs(&[a.id]);
        self.push(Op::Scale(a.id, k), a.rows, a.cols, out, ng, "scale")
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Matrix, k: f64) -> Result<Matrix, DiffError> {
        self.check(a)?;
        let out = self.nodes[a.id].value.iter().map(|x| x + k).collect();
        let ng = self.needs(&[a.id]);
        self.push(Op::Shift(a.id), a.rows, a.cols, out, ng, "shift")
    }

    fn unary(
        &mut self,
        a: Matrix,
        op: Op,
        name: &'static str,
        f: impl Fn(f64) -> f64,
    ) -> Result<Matrix, DiffError> {
        self.check(a)?;
        let out = self.nodes[a.id].value.iter().map(|&x| f(x)).collect();
        let ng = self.needs(&[a.id]);
        self.push(op, a.rows, a.cols, out, ng, name)
    }

    pub fn sigmoid(&mut self, a: Matrix) -> Result<Matrix, DiffError> {
        self.unary(a, Op::Sigmoid(a.id), "sigmoid", sigmoid)
    }

    pub fn tanh(&mut self, a: Matrix) -> Result<Matrix, DiffError> {
        self.unary(a, Op::Tanh(a.id), "tanh", f64::tanh)
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, a: Matrix) -> Result<Matrix, DiffError> {
        self.unary(a, Op::Softplus(a.id), "softplus", softplus)
    }

    pub fn exp(&mut self, a: Matrix) -> Result<Matrix, DiffError> {
        self.unary(a, Op::Exp(a.id), "exp", f64::exp)
    }

    /// `ln(max(x, EPS_PROB))`; clamped elements pass no gradient.
    pub fn ln_clamped(&mut self, a: Matrix) -> Result<Matrix, DiffError> {
        self.check(a)?;
        let mut clamped = 0;
        let out = self.nodes[a.id]
            .value
            .iter()
            .map(|&x| {
                if x <= EPS_PROB {
                    clamped += 1;
                    EPS_PROB.ln()
                } else {
                    x.ln()
                }
            })
            .collect();
        self.clamp_count += clamped;
        let ng = self.needs(&[a.id]);
        self.push(Op::LnClamped(a.id), a.rows, a.cols, out, ng, "ln")
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Matrix) -> Result<Matrix, DiffError> {
        self.check(a)?;
        if a.is_empty() {
            return Err(DiffError::Empty { op: "softmax" });
        }
        let av = &self.nodes[a.id].value;
        let mut out = vec![0.0; av.len()];
        for (src, dst) in av.chunks(a.cols).zip(out.chunks_mut(a.cols)) {
            softmax_into(src, dst);
        }
        let ng = self.needs(&[a.id]);
        self.push(Op::SoftmaxRows(a.id), a.rows, a.cols, out, ng, "softmax")
    }

    /// Softmax of a single row vector.
    pub fn softmax_row(&mut self, v: Matrix) -> Result<Matrix, DiffError> {
        self.check(v)?;
        if v.is_empty() {
            return Err(DiffError::Empty { op: "softmax_row" });
        }
        if v.rows != 1 {
            return Err(DiffError::Shape {
                op: "softmax_row",
                lhs: v.shape(),
                rhs: (1, v.cols),
            });
        }
        self.softmax_rows(v)
    }

    pub fn concat_cols(&mut self, parts: &[Matrix]) -> Result<Matrix, DiffError> {
        let first = *parts.first().ok_or(DiffError::Empty { op: "concat_cols" })?;
        let mut cols = 0;
        for p in parts {
            self.check(*p)?;
            if p.rows != first.rows {
                return Err(DiffError::Shape {
                    op: "concat_cols",
                    lhs: first.shape(),
                    rhs: p.shape(),
                });
            }
            cols += p.cols;
        }
        let rows = first.rows;
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(&self.nodes[p.id].value[r * p.cols..(r + 1) * p.cols]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let ng = self.needs(&ids);
        self.push(Op::ConcatCols(ids), rows, cols, out, ng, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Matrix]) -> Result<Matrix, DiffError> {
        let first = *parts.first().ok_or(DiffError::Empty { op: "concat_rows" })?;
        let mut rows = 0;
        for p in parts {
            self.check(*p)?;
            if p.cols != first.cols {
                return Err(DiffError::Shape {
                    op: "concat_rows",
                    lhs: first.shape(),
                    rhs: p.shape(),
                });
            }
            rows += p.rows;
        }
        let mut out = Vec::with_capacity(rows * first.cols);
        for p in parts {
            out.extend_from_slice(&self.nodes[p.id].value);
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let ng = self.needs(&ids);
        self.push(Op::ConcatRows(ids), rows, first.cols, out, ng, "concat_rows")
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Matrix, start: usize, end: usize) -> Result<Matrix, DiffError> {
        self.check(a)?;
        if start >= end || end > a.cols {
            return Err(DiffError::Shape {
                op: "slice_cols",
                lhs: a.shape(),
                rhs: (start, end),
            });
        }
        let w = end - start;
        let av = &self.nodes[a.id].value;
        let mut out = Vec::with_capacity(a.rows * w);
        for r in 0..a.rows {
            out.extend_from_slice(&av[r * a.cols + start..r * a.cols + end]);
        }
        let ng = self.needs(&[a.id]);
        self.push(Op::SliceCols(a.id, start), a.rows, w, out, ng, "slice_cols")
    }

    pub fn sum(&mut self, a: Matrix) -> Result<Matrix, DiffError> {
        self.check(a)?;
        let s = self.nodes[a.id].value.iter().sum();
        let ng = self.needs(&[a.id]);
        self.push(Op::Sum(a.id), 1, 1, vec![s], ng, "sum")
    }

    /// Sum of a list of scalars; an empty list yields a constant zero.
    pub fn add_all(&mut self, terms: &[Matrix]) -> Result<Matrix, DiffError> {
        match terms {
            [] => self.scalar(0.0),
            [one] => Ok(*one),
            _ => {
                let row = self.concat_cols(terms)?;
                self.sum(row)
            }
        }
    }

    /// `-ln(pred[target])` for a probability row vector.
    pub fn cross_entropy(&mut self, pred: Matrix, target: usize) -> Result<Matrix, DiffError> {
        self.check(pred)?;
        if pred.rows != 1 || pred.cols == 0 {
            return Err(DiffError::Shape {
                op: "cross_entropy",
                lhs: pred.shape(),
                rhs: (1, target + 1),
            });
        }
        if target >= pred.cols {
            return Err(DiffError::Index {
                index: target,
                len: pred.cols,
            });
        }
        let p = self.nodes[pred.id].value[target];
        let y = if p <= EPS_PROB {
            self.clamp_count += 1;
            -EPS_PROB.ln()
        } else {
            -p.ln()
        };
        let ng = self.needs(&[pred.id]);
        self.push(Op::NegLogPick(pred.id, target), 1, 1, vec![y], ng, "cross_entropy")
    }

    /// `-Σ_k target_k ln pred_k` against a constant distribution.
    pub fn soft_cross_entropy(&mut self, pred: Matrix, target: &[f64]) -> Result<Matrix, DiffError> {
        self.check(pred)?;
        if pred.rows != 1 || pred.cols != target.len() {
            return Err(DiffError::Shape {
                op: "soft_cross_entropy",
                lhs: pred.shape(),
                rhs: (1, target.len()),
            });
        }
        let pv = &self.nodes[pred.id].value;
        let mut y = 0.0;
        let mut clamped = 0;
        for (p, t) in pv.iter().zip(target) {
            if *t == 0.0 {
                continue;
            }
            if *p <= EPS_PROB {
                clamped += 1;
                y -= t * EPS_PROB.ln();
            } else {
                y -= t * p.ln();
            }
        }
        self.clamp_count += clamped;
        let ng = self.needs(&[pred.id]);
        self.push(
            Op::SoftCrossEntropy(pred.id, target.to_vec()),
            1,
            1,
            vec![y],
            ng,
            "soft_cross_entropy",
        )
    }

    /// `Σ (a - b)²` over all elements.
    pub fn squared_distance(&mut self, a: Matrix, b: Matrix) -> Result<Matrix, DiffError> {
        self.same_shape("squared_distance", a, b)?;
        let s = self.nodes[a.id]
            .value
            .iter()
            .zip(&self.nodes[b.id].value)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let ng = self.needs(&[a.id, b.id]);
        self.push(Op::SquaredDiff(a.id, b.id), 1, 1, vec![s], ng, "squared_distance")
    }

    /// `(pred - target)²` for scalars.
    pub fn mse(&mut self, pred: Matrix, target: Matrix) -> Result<Matrix, DiffError> {
        if !pred.is_scalar() || !target.is_scalar() {
            return Err(DiffError::Shape {
                op: "mse",
                lhs: pred.shape(),
                rhs: target.shape(),
            });
        }
        self.squared_distance(pred, target)
    }

    /// Runs the reverse pass from a scalar root. May be called once per tape.
    pub fn backward(&mut self, root: Matrix) -> Result<(), DiffError> {
        self.check(root)?;
        if self.backward_done {
            return Err(DiffError::BackwardTwice);
        }
        if !root.is_scalar() {
            return Err(DiffError::NonScalarRoot {
                rows: root.rows,
                cols: root.cols,
            });
        }
        self.backward_done = true;
        self.grads = vec![Vec::new(); self.nodes.len()];
        self.grads[root.id] = vec![1.0];
        for id in (0..=root.id).rev() {
            if self.grads[id].is_empty() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = std::mem::take(&mut self.grads[id]);
            self.propagate(id, &g);
            self.grads[id] = g;
        }
        Ok(())
    }

    fn acc(&mut self, id: usize, f: impl FnOnce(&mut [f64], &[Node])) {
        if !self.nodes[id].needs_grad {
            return;
        }
        if self.grads[id].is_empty() {
            self.grads[id] = vec![0.0; self.nodes[id].value.len()];
        }
        let mut buf = std::mem::take(&mut self.grads[id]);
        f(&mut buf, &self.nodes);
        self.grads[id] = buf;
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        let op = self.nodes[id].op.clone();
        let (rows, cols) = (self.nodes[id].rows, self.nodes[id].cols);
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let k = self.nodes[a].cols;
                // dA = G·Bᵀ
                self.acc(a, |da, n| {
                    let bv = &n[b].value;
                    for i in 0..rows {
                        let grow = &g[i * cols..(i + 1) * cols];
                        for p in 0..k {
                            let brow = &bv[p * cols..(p + 1) * cols];
                            da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // dB = Aᵀ·G
                self.acc(b, |db, n| {
                    let av = &n[a].value;
                    for i in 0..rows {
                        let grow = &g[i * cols..(i + 1) * cols];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            let drow = &mut db[p * cols..(p + 1) * cols];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += x * gv;
                            }
                        }
                    }
                });
            }
            Op::MatMulNT(a, b) => {
                let k = self.nodes[a].cols;
                // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                self.acc(a, |da, n| {
                    let bv = &n[b].value;
                    for i in 0..rows {
                        for j in 0..cols {
                            let gv = g[i * cols + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gv * bv[j * k + p];
                            }
                        }
                    }
                });
                self.acc(b, |db, n| {
                    let av = &n[a].value;
                    for i in 0..rows {
                        for j in 0..cols {
                            let gv = g[i * cols + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                db[j * k + p] += gv * av[i * k + p];
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(a, |d, _| add_into(d, g));
                self.acc(b, |d, _| add_into(d, g));
            }
            Op::AddRow(a, b) => {
                self.acc(a, |d, _| add_into(d, g));
                self.acc(b, |d, _| {
                    for (i, gv) in g.iter().enumerate() {
                        d[i % cols] += gv;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.acc(a, |d, _| add_into(d, g));
                self.acc(b, |d, _| {
                    for (x, gv) in d.iter_mut().zip(g) {
                        *x -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                self.acc(a, |d, n| {
                    for ((x, gv), bv) in d.iter_mut().zip(g).zip(&n[b].value) {
                        *x += gv * bv;
                    }
                });
                self.acc(b, |d, n| {
                    for ((x, gv), av) in d.iter_mut().zip(g).zip(&n[a].value) {
                        *x += gv * av;
                    }
                });
            }
            Op::Scale(a, k) => self.acc(a, |d, _| {
                for (x, gv) in d.iter_mut().zip(g) {
                    *x += k * gv;
                }
            }),
            Op::Shift(a) => self.acc(a, |d, _| add_into(d, g)),
            Op::Sigmoid(a) => self.acc(a, |d, n| {
                for ((x, gv), y) in d.iter_mut().zip(g).zip(&n[id].value) {
                    *x += gv * y * (1.0 - y);
                }
            }),
            Op::Tanh(a) => self.acc(a, |d, n| {
                for ((x, gv), y) in d.iter_mut().zip(g).zip(&n[id].value) {
                    *x += gv * (1.0 - y * y);
                }
            }),
            Op::Softplus(a) => self.acc(a, |d, n| {
                for ((x, gv), inp) in d.iter_mut().zip(g).zip(&n[a].value) {
                    *x += gv * sigmoid(*inp);
                }
            }),
            Op::Exp(a) => self.acc(a, |d, n| {
                for ((x, gv), y) in d.iter_mut().zip(g).zip(&n[id].value) {
                    *x += gv * y;
                }
            }),
            Op::LnClamped(a) => self.acc(a, |d, n| {
                for ((x, gv), inp) in d.iter_mut().zip(g).zip(&n[a].value) {
                    if *inp > EPS_PROB {
                        *x += gv / inp;
                    }
                }
            }),
            Op::SoftmaxRows(a) => self.acc(a, |d, n| {
                let y = &n[id].value;
                for r in 0..rows {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        d[r * cols + c] += ys[c] * (gs[c] - dot);
                    }
                }
            }),
            Op::ConcatCols(ids) => {
                let mut offset = 0;
                for p in ids {
                    let pc = self.nodes[p].cols;
                    self.acc(p, |d, _| {
                        for r in 0..rows {
                            for c in 0..pc {
                                d[r * pc + c] += g[r * cols + offset + c];
                            }
                        }
                    });
                    offset += pc;
                }
            }
            Op::ConcatRows(ids) => {
                let mut offset = 0;
                for p in ids {
                    let len = self.nodes[p].value.len();
                    self.acc(p, |d, _| add_into(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let ac = self.nodes[a].cols;
                self.acc(a, |d, _| {
                    for r in 0..rows {
                        for c in 0..cols {
                            d[r * ac + start + c] += g[r * cols + c];
                        }
                    }
                });
            }
            Op::Sum(a) => self.acc(a, |d, _| {
                for x in d.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::NegLogPick(a, t) => self.acc(a, |d, n| {
                let p = n[a].value[t];
                if p > EPS_PROB {
                    d[t] -= g[0] / p;
                }
            }),
            Op::SoftCrossEntropy(a, target) => self.acc(a, |d, n| {
                for ((x, p), t) in d.iter_mut().zip(&n[a].value).zip(&target) {
                    if *p > EPS_PROB {
                        *x -= g[0] * t / p;
                    }
                }
            }),
            Op::SquaredDiff(a, b) => {
                self.acc(a, |d, n| {
                    for ((x, av), bv) in d.iter_mut().zip(&n[a].value).zip(&n[b].value) {
                        *x += 2.0 * g[0] * (av - bv);
                    }
                });
                self.acc(b, |d, n| {
                    for ((x, av), bv) in d.iter_mut().zip(&n[a].value).zip(&n[b].value) {
                        *x -= 2.0 * g[0] * (av - bv);
                    }
                });
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn add_into(d: &mut [f64], g: &[f64]) {
    for (x, y) in d.iter_mut().zip(g) {
        *x += y;
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

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// Numerically stable softmax of `src` into `dst`.
pub fn softmax_into(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_dot() {
        let mut t = Tape::new();
        let a = t.constant(2, 2, vec![1., 2., 3., 4.]).unwrap();
        let i = t.constant(2, 2, vec![1., 0., 0., 1.]).unwrap();
        let c = t.matmul(a, i).unwrap();
        assert_eq!(t.value(c), &[1., 2., 3., 4.]);
        let r = t.row(&[1., 2.]).unwrap();
        let col = t.constant(2, 1, vec![3., 4.]).unwrap();
        let d = t.matmul(r, col).unwrap();
        assert_eq!(t.value(d), &[11.]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(1, 2, vec![1., 2.]).unwrap();
        let b = t.constant(3, 1, vec![1., 2., 3.]).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(1, 2)") && msg.contains("(3, 1)"), "{msg}");
    }

    #[test]
    fn foreign_tape_is_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = t1.scalar(1.0).unwrap();
        let b = t2.scalar(1.0).unwrap();
        assert!(matches!(t2.add(a, b), Err(DiffError::ForeignTape)));
    }

    #[test]
    fn matmul_gradient_matches_hand_value() {
        let mut t = Tape::new();
        let a = t.variable(1, 2, vec![0.5, 0.1]).unwrap();
        let b = t.constant(2, 1, vec![2., 3.]).unwrap();
        let c = t.matmul(a, b).unwrap();
        let s = t.sum(c).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(a), vec![2., 3.]);
    }

    #[test]
    fn softmax_cases() {
        let mut t = Tape::new();
        let z = t.row(&[0., 0., 0.]).unwrap();
        let s = t.softmax_row(z).unwrap();
        for v in t.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = t.row(&[1000., 0.]).unwrap();
        let s = t.softmax_row(big).unwrap();
        assert!((t.value(s)[0] - 1.0).abs() < 1e-12);
        assert!(t.value(s)[1] >= 0.0 && t.value(s)[1] < 1e-300);
        let l = t.row(&[2f64.ln(), 0.0]).unwrap();
        let s = t.softmax_row(l).unwrap();
        assert!((t.value(s)[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((t.value(s)[1] - 1.0 / 3.0).abs() < 1e-12);
        let empty = t.constant(1, 0, vec![]).unwrap();
        assert!(matches!(t.softmax_row(empty), Err(DiffError::Empty { .. })));
    }

    #[test]
    fn cross_entropy_cases() {
        let mut t = Tape::new();
        let p = t.row(&[1., 0., 0.]).unwrap();
        let l = t.cross_entropy(p, 0).unwrap();
        assert_eq!(t.scalar_value(l), 0.0);
        let q = t.row(&[0.5, 0.5]).unwrap();
        let l = t.cross_entropy(q, 1).unwrap();
        assert!((t.scalar_value(l) - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(t.cross_entropy(q, 2), Err(DiffError::Index { .. })));
        assert_eq!(t.clamp_count(), 0);
        let l = t.cross_entropy(p, 1).unwrap();
        assert!((t.scalar_value(l) + EPS_PROB.ln()).abs() < 1e-12);
        assert_eq!(t.clamp_count(), 1);
    }

    #[test]
    fn mse_value_and_gradient() {
        let mut t = Tape::new();
        let a = t.variable(1, 1, vec![0.3]).unwrap();
        let b = t.scalar(0.3).unwrap();
        let z = t.mse(a, b).unwrap();
        assert_eq!(t.scalar_value(z), 0.0);

        let mut t = Tape::new();
        let a = t.variable(1, 1, vec![0.5]).unwrap();
        let b = t.scalar(0.2).unwrap();
        let z = t.mse(a, b).unwrap();
        assert!((t.scalar_value(z) - 0.09).abs() < 1e-15);
        t.backward(z).unwrap();
        assert!((t.grad(a)[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut t = Tape::new();
        let a = t.variable(1, 1, vec![2.0]).unwrap();
        let s = t.mul(a, a).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(s), vec![1.0]);
        assert_eq!(t.grad(a), vec![4.0]);
        assert!(matches!(t.backward(s), Err(DiffError::BackwardTwice)));
    }

    #[test]
    fn non_finite_forward_is_detected() {
        let mut t = Tape::new();
        let a = t.scalar(1000.0).unwrap();
        assert!(matches!(t.exp(a), Err(DiffError::NonFinite { .. })));
    }

    #[test]
    fn constants_do_not_collect_gradient() {
        let mut t = Tape::new();
        let a = t.variable(1, 2, vec![1.0, 2.0]).unwrap();
        let c = t.row(&[3.0, 4.0]).unwrap();
        let p = t.mul(a, c).unwrap();
        let s = t.sum(p).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(a), vec![3.0, 4.0]);
        assert!(!t.has_grad(c));
    }

    #[test]
    fn concat_and_slice_route_gradients() {
        let mut t = Tape::new();
        let a = t.variable(2, 1, vec![1.0, 2.0]).unwrap();
        let b = t.variable(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = t.concat_cols(&[a, b]).unwrap();
        assert_eq!(t.value(c), &[1., 3., 4., 2., 5., 6.]);
        let s = t.slice_cols(c, 1, 2).unwrap();
        assert_eq!(t.value(s), &[3., 5.]);
        let w = t.constant(2, 1, vec![10., 20.]).unwrap();
        let m = t.mul(s, w).unwrap();
        let tot = t.sum(m).unwrap();
        t.backward(tot).unwrap();
        assert_eq!(t.grad(a), vec![0., 0.]);
        assert_eq!(t.grad(b), vec![10., 0., 20., 0.]);
    }
}
