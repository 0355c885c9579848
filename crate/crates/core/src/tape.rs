//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] records one computation graph per training step: operations
//! append nodes holding the forward value, and [`Tape::backward`] walks the
//! node list in reverse, accumulating gradients. Node handles are plain
//! indices ([`Var`]), so graphs are cheap to build and are dropped wholesale
//! at the end of each step.
//!
//! Every operation works on rank-2 tensors (see [`Tensor`]); "row" variants
//! broadcast a `[1, C]` operand over the rows of an `[R, C]` tensor, and
//! `scale_rows` broadcasts an `[R, 1]` column over each row.

use crate::error::{CoreError, Result};
use crate::par;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    SubRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    ScaleRows(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Square(Var),
    Sqrt(Var),
    Abs(Var),
    Recip(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    ColMean(Var),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Embedding { table: Var, ids: Vec<usize> },
    RowSelect { x: Var, ids: Vec<usize> },
    LogSoftmax(Var),
    Dropout { x: Var, mask: Tensor },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Wengert list holding one step's computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> CoreError {
    CoreError::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.value(v).shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn clear_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> Result<Var> {
        Ok(self.constant(Tensor::scalar(v)?))
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        // Nodes nothing differentiates through keep only their value; the
        // graph records an edge set only where gradients can flow.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg2(&self, a: Var, b: Var) -> bool {
        self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
    }

    fn rg1(&self, a: Var) -> bool {
        self.nodes[a.0].requires_grad
    }

    // ----- binary element-wise -----

    fn zip_same(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op_name, ta, tb));
        }
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::checked(ta.shape().to_vec(), data, op_name)?;
        Ok(self.push(make(a, b), value, self.rg2(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&y| y == 0.0) {
            return Err(CoreError::Domain { op: "div" });
        }
        self.zip_same("div", a, b, |x, y| x / y, Op::Div)
    }

    // ----- broadcasting variants -----

    fn zip_row(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(shape_err(op_name, ta, tb));
        }
        let cols = ta.cols();
        let row = tb.data();
        let data: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, row[i % cols]))
            .collect();
        let value = Tensor::checked(ta.shape().to_vec(), data, op_name)?;
        Ok(self.push(make(a, b), value, self.rg2(a, b)))
    }

    /// `[R, C] + [1, C]`, broadcasting the row over every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_row("add_row", a, b, |x, y| x + y, Op::AddRow)
    }

    pub fn sub_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_row("sub_row", a, b, |x, y| x - y, Op::SubRow)
    }

    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_row("mul_row", a, b, |x, y| x * y, Op::MulRow)
    }

    /// `[R, C] + [R, 1]`, broadcasting the column over every column of `a`.
    pub fn add_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.cols() != 1 || tb.rows() != ta.rows() {
            return Err(shape_err("add_col", ta, tb));
        }
        let cols = ta.cols();
        let col = tb.data();
        let data: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + col[i / cols])
            .collect();
        let value = Tensor::checked(ta.shape().to_vec(), data, "add_col")?;
        Ok(self.push(Op::AddCol(a, b), value, self.rg2(a, b)))
    }

    /// `[R, C] * [R, 1]`: scales row `r` of `a` by `s[r]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        if ts.cols() != 1 || ts.rows() != ta.rows() {
            return Err(shape_err("scale_rows", ta, ts));
        }
        let cols = ta.cols();
        let col = ts.data();
        let data: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * col[i / cols])
            .collect();
        let value = Tensor::checked(ta.shape().to_vec(), data, "scale_rows")?;
        Ok(self.push(Op::ScaleRows(a, s), value, self.rg2(a, s)))
    }

    // ----- scalar-constant variants -----

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data().iter().map(|&x| x + c).collect();
        let value = Tensor::checked(ta.shape().to_vec(), data, "add_scalar")?;
        Ok(self.push(Op::AddScalar(a), value, self.rg1(a)))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data().iter().map(|&x| x * c).collect();
        let value = Tensor::checked(ta.shape().to_vec(), data, "mul_scalar")?;
        Ok(self.push(Op::MulScalar(a, c), value, self.rg1(a)))
    }

    // ----- matmul / transpose -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let value = matmul_dense(ta, tb, "matmul")?;
        Ok(self.push(Op::Matmul(a, b), value, self.rg2(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let src = ta.data();
        let mut data = vec![0.0; src.len()];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::checked(vec![c, r], data, "transpose")?;
        Ok(self.push(Op::Transpose(a), value, self.rg1(a)))
    }

    // ----- element-wise unary -----

    fn unary(
        &mut self,
        op_name: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        make: impl Fn(Var) -> Op,
    ) -> Result<Var> {
        let ta = self.value(a);
        let data: Vec<f64> = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::checked(ta.shape().to_vec(), data, op_name)?;
        Ok(self.push(make(a), value, self.rg1(a)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(CoreError::Domain { op: "log" });
        }
        self.unary("log", a, f64::ln, Op::Log)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(CoreError::Domain { op: "sqrt" });
        }
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs)
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x == 0.0) {
            return Err(CoreError::Domain { op: "recip" });
        }
        self.unary("recip", a, |x| 1.0 / x, Op::Recip)
    }

    // ----- reductions -----

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let value = Tensor::checked(vec![1, 1], vec![s], "sum")?;
        Ok(self.push(Op::Sum(a), value, self.rg1(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let s: f64 = ta.data().iter().sum();
        let value = Tensor::checked(vec![1, 1], vec![s / ta.len() as f64], "mean")?;
        Ok(self.push(Op::Mean(a), value, self.rg1(a)))
    }

    /// `[R, C] -> [R, 1]`: sum across each row.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let r = ta.rows();
        let data: Vec<f64> = (0..r).map(|i| ta.row_slice(i).iter().sum()).collect();
        let value = Tensor::checked(vec![r, 1], data, "row_sum")?;
        Ok(self.push(Op::RowSum(a), value, self.rg1(a)))
    }

    /// `[R, C] -> [1, C]`: mean down each column.
    pub fn col_mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (j, v) in ta.row_slice(i).iter().enumerate() {
                data[j] += v;
            }
        }
        for v in &mut data {
            *v /= r as f64;
        }
        let value = Tensor::checked(vec![1, c], data, "col_mean")?;
        Ok(self.push(Op::ColMean(a), value, self.rg1(a)))
    }

    // ----- structural -----

    /// Concatenate along columns: `[R, C1] ++ [R, C2] -> [R, C1 + C2]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(shape_err("concat_cols", ta, tb));
        }
        let (r, ca, cb) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(ta.row_slice(i));
            data.extend_from_slice(tb.row_slice(i));
        }
        let value = Tensor::checked(vec![r, ca + cb], data, "concat_cols")?;
        Ok(self.push(Op::ConcatCols(a, b), value, self.rg2(a, b)))
    }

    /// Concatenate along rows: `[R1, C] ++ [R2, C] -> [R1 + R2, C]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(shape_err("concat_rows", ta, tb));
        }
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        let value = Tensor::checked(vec![ta.rows() + tb.rows(), ta.cols()], data, "concat_rows")?;
        Ok(self.push(Op::ConcatRows(a, b), value, self.rg2(a, b)))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        if start >= end || end > c {
            return Err(CoreError::ShapeMismatch {
                op: "slice_cols",
                lhs: ta.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&ta.row_slice(i)[start..end]);
        }
        let value = Tensor::checked(vec![r, w], data, "slice_cols")?;
        Ok(self.push(Op::SliceCols { x: a, start }, value, self.rg1(a)))
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        if start >= end || end > r {
            return Err(CoreError::ShapeMismatch {
                op: "slice_rows",
                lhs: ta.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let data = ta.data()[start * c..end * c].to_vec();
        let value = Tensor::checked(vec![end - start, c], data, "slice_rows")?;
        Ok(self.push(Op::SliceRows { x: a, start }, value, self.rg1(a)))
    }

    /// Row lookup: `table[V, E]` gathered at `ids` gives `[ids.len(), E]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, e) = (tt.rows(), tt.cols());
        if ids.is_empty() {
            return Err(CoreError::EmptyInput {
                what: "embedding id list",
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(CoreError::VocabOutOfRange { id: bad, size: v });
        }
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            data.extend_from_slice(tt.row_slice(id));
        }
        let value = Tensor::checked(vec![ids.len(), e], data, "embedding")?;
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            value,
            self.rg1(table),
        ))
    }

    /// Per-row column pick: result `[R, 1]` with `out[r] = a[r, ids[r]]`.
    pub fn row_select(&mut self, a: Var, ids: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        if ids.len() != r {
            return Err(CoreError::ShapeMismatch {
                op: "row_select",
                lhs: ta.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= c) {
            return Err(CoreError::VocabOutOfRange { id: bad, size: c });
        }
        let data: Vec<f64> = ids.iter().enumerate().map(|(i, &j)| ta.get(i, j)).collect();
        let value = Tensor::checked(vec![r, 1], data, "row_select")?;
        Ok(self.push(
            Op::RowSelect {
                x: a,
                ids: ids.to_vec(),
            },
            value,
            self.rg1(a),
        ))
    }

    /// Numerically stable row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = ta.row_slice(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|&x| x - lse));
        }
        let value = Tensor::checked(vec![r, c], data, "log_softmax")?;
        Ok(self.push(Op::LogSoftmax(a), value, self.rg1(a)))
    }

    /// Apply a precomputed dropout mask (an inverted-dropout mask holds 0 or
    /// `1/keep` entries). The mask is a plain constant: gradients flow only
    /// to `a`.
    pub fn dropout(&mut self, a: Var, mask: &Tensor) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape() != mask.shape() {
            return Err(shape_err("dropout", ta, mask));
        }
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&x, &m)| x * m)
            .collect();
        let value = Tensor::checked(ta.shape().to_vec(), data, "dropout")?;
        Ok(self.push(
            Op::Dropout {
                x: a,
                mask: mask.clone(),
            },
            value,
            self.rg1(a),
        ))
    }

    // ----- backward -----

    /// Reverse sweep from `root`, which must hold a single scalar. Each call
    /// propagates a fresh unit seed and adds the result onto any gradients
    /// already stored, so repeated calls accumulate.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(CoreError::NonScalarRoot {
                shape: self.value(root).shape().to_vec(),
            });
        }
        let mut sweep: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        sweep[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = sweep[i].take() else { continue };
            self.propagate(i, &g, &mut sweep);
            sweep[i] = Some(g);
        }
        for (slot, s) in self.grads.iter_mut().zip(sweep) {
            if let Some(sv) = s {
                match slot {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&sv) {
                            *a += v;
                        }
                    }
                    None => *slot = Some(sv),
                }
            }
        }
        Ok(())
    }

    /// Add `f(i)` into the sweep gradient of `v`, if `v` participates.
    fn accum(&self, sweep: &mut [Option<Vec<f64>>], v: Var, f: impl Fn(usize) -> f64) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = sweep[v.0].get_or_insert_with(|| vec![0.0; len]);
        for (i, g) in slot.iter_mut().enumerate() {
            *g += f(i);
        }
    }

    fn accum_slice(&self, sweep: &mut [Option<Vec<f64>>], v: Var, add: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = sweep[v.0].get_or_insert_with(|| vec![0.0; len]);
        for (s, a) in slot.iter_mut().zip(add) {
            *s += a;
        }
    }

    fn propagate(&self, i: usize, g: &[f64], sweep: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.accum(sweep, a, |k| g[k]);
                self.accum(sweep, b, |k| g[k]);
            }
            &Op::Sub(a, b) => {
                self.accum(sweep, a, |k| g[k]);
                self.accum(sweep, b, |k| -g[k]);
            }
            &Op::Mul(a, b) => {
                let ad = self.nodes[a.0].value.data();
                let bd = self.nodes[b.0].value.data();
                self.accum(sweep, a, |k| g[k] * bd[k]);
                self.accum(sweep, b, |k| g[k] * ad[k]);
            }
            &Op::Div(a, b) => {
                let bd = self.nodes[b.0].value.data();
                let yd = self.nodes[i].value.data();
                self.accum(sweep, a, |k| g[k] / bd[k]);
                self.accum(sweep, b, |k| -g[k] * yd[k] / bd[k]);
            }
            &Op::AddRow(a, b) => {
                let cols = self.nodes[b.0].value.cols();
                let rows = g.len() / cols;
                self.accum(sweep, a, |k| g[k]);
                self.accum(sweep, b, |j| (0..rows).map(|r| g[r * cols + j]).sum());
            }
            &Op::SubRow(a, b) => {
                let cols = self.nodes[b.0].value.cols();
                let rows = g.len() / cols;
                self.accum(sweep, a, |k| g[k]);
                self.accum(sweep, b, |j| -(0..rows).map(|r| g[r * cols + j]).sum::<f64>());
            }
            &Op::MulRow(a, b) => {
                let cols = self.nodes[b.0].value.cols();
                let rows = g.len() / cols;
                let ad = self.nodes[a.0].value.data();
                let bd = self.nodes[b.0].value.data();
                self.accum(sweep, a, |k| g[k] * bd[k % cols]);
                self.accum(sweep, b, |j| {
                    (0..rows).map(|r| g[r * cols + j] * ad[r * cols + j]).sum()
                });
            }
            &Op::AddCol(a, b) => {
                let cols = self.nodes[a.0].value.cols();
                self.accum(sweep, a, |k| g[k]);
                self.accum(sweep, b, |r| g[r * cols..(r + 1) * cols].iter().sum());
            }
            &Op::ScaleRows(a, s) => {
                let cols = self.nodes[a.0].value.cols();
                let ad = self.nodes[a.0].value.data();
                let sd = self.nodes[s.0].value.data();
                self.accum(sweep, a, |k| g[k] * sd[k / cols]);
                self.accum(sweep, s, |r| {
                    (0..cols).map(|c| g[r * cols + c] * ad[r * cols + c]).sum()
                });
            }
            &Op::AddScalar(a) => self.accum(sweep, a, |k| g[k]),
            &Op::MulScalar(a, c) => self.accum(sweep, a, |k| g[k] * c),
            &Op::Matmul(a, b) => {
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let (ad, bd) = (ta.data(), tb.data());
                if self.nodes[a.0].requires_grad {
                    // dA = G * B^T
                    let mut da = vec![0.0; m * k];
                    par::fill_rows(&mut da, k, k * n, |r, row| {
                        let grow = &g[r * n..(r + 1) * n];
                        for (j, slot) in row.iter_mut().enumerate() {
                            let brow = &bd[j * n..(j + 1) * n];
                            *slot = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                        }
                    });
                    self.accum_slice(sweep, a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = A^T * G
                    let mut db = vec![0.0; k * n];
                    par::fill_rows(&mut db, n, m * n, |j, row| {
                        for r in 0..m {
                            let aval = ad[r * k + j];
                            if aval == 0.0 {
                                continue;
                            }
                            let grow = &g[r * n..(r + 1) * n];
                            for (c, slot) in row.iter_mut().enumerate() {
                                *slot += aval * grow[c];
                            }
                        }
                    });
                    self.accum_slice(sweep, b, &db);
                }
            }
            &Op::Transpose(a) => {
                let c = self.nodes[a.0].value.cols();
                let r = self.nodes[a.0].value.rows();
                self.accum(sweep, a, |k| {
                    let (i0, j0) = (k / c, k % c);
                    g[j0 * r + i0]
                });
            }
            &Op::Tanh(a) => {
                let yd = self.nodes[i].value.data();
                self.accum(sweep, a, |k| g[k] * (1.0 - yd[k] * yd[k]));
            }
            &Op::Sigmoid(a) => {
                let yd = self.nodes[i].value.data();
                self.accum(sweep, a, |k| g[k] * yd[k] * (1.0 - yd[k]));
            }
            &Op::Exp(a) => {
                let yd = self.nodes[i].value.data();
                self.accum(sweep, a, |k| g[k] * yd[k]);
            }
            &Op::Log(a) => {
                let xd = self.nodes[a.0].value.data();
                self.accum(sweep, a, |k| g[k] / xd[k]);
            }
            &Op::Softplus(a) => {
                let xd = self.nodes[a.0].value.data();
                self.accum(sweep, a, |k| g[k] * sigmoid(xd[k]));
            }
            &Op::Square(a) => {
                let xd = self.nodes[a.0].value.data();
                self.accum(sweep, a, |k| g[k] * 2.0 * xd[k]);
            }
            &Op::Sqrt(a) => {
                let yd = self.nodes[i].value.data();
                self.accum(sweep, a, |k| g[k] / (2.0 * yd[k]));
            }
            &Op::Abs(a) => {
                let xd = self.nodes[a.0].value.data();
                self.accum(sweep, a, |k| g[k] * sign(xd[k]));
            }
            &Op::Recip(a) => {
                let yd = self.nodes[i].value.data();
                self.accum(sweep, a, |k| -g[k] * yd[k] * yd[k]);
            }
            &Op::Sum(a) => {
                let s = g[0];
                self.accum(sweep, a, |_| s);
            }
            &Op::Mean(a) => {
                let s = g[0] / self.nodes[a.0].value.len() as f64;
                self.accum(sweep, a, |_| s);
            }
            &Op::RowSum(a) => {
                let cols = self.nodes[a.0].value.cols();
                self.accum(sweep, a, |k| g[k / cols]);
            }
            &Op::ColMean(a) => {
                let rows = self.nodes[a.0].value.rows();
                let cols = self.nodes[a.0].value.cols();
                let inv = 1.0 / rows as f64;
                self.accum(sweep, a, |k| g[k % cols] * inv);
            }
            &Op::ConcatCols(a, b) => {
                let ca = self.nodes[a.0].value.cols();
                let cb = self.nodes[b.0].value.cols();
                let w = ca + cb;
                self.accum(sweep, a, |k| g[(k / ca) * w + k % ca]);
                self.accum(sweep, b, |k| g[(k / cb) * w + ca + k % cb]);
            }
            &Op::ConcatRows(a, b) => {
                let la = self.nodes[a.0].value.len();
                self.accum(sweep, a, |k| g[k]);
                self.accum(sweep, b, |k| g[la + k]);
            }
            &Op::SliceCols { x, start } => {
                let cols = self.nodes[x.0].value.cols();
                let w = self.nodes[i].value.cols();
                if self.nodes[x.0].requires_grad {
                    let len = self.nodes[x.0].value.len();
                    let slot = sweep[x.0].get_or_insert_with(|| vec![0.0; len]);
                    for (k, &gv) in g.iter().enumerate() {
                        let (r, c) = (k / w, k % w);
                        slot[r * cols + start + c] += gv;
                    }
                }
            }
            &Op::SliceRows { x, start } => {
                let cols = self.nodes[x.0].value.cols();
                if self.nodes[x.0].requires_grad {
                    let len = self.nodes[x.0].value.len();
                    let slot = sweep[x.0].get_or_insert_with(|| vec![0.0; len]);
                    for (k, &gv) in g.iter().enumerate() {
                        slot[start * cols + k] += gv;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let e = self.nodes[table.0].value.cols();
                if self.nodes[table.0].requires_grad {
                    let len = self.nodes[table.0].value.len();
                    let slot = sweep[table.0].get_or_insert_with(|| vec![0.0; len]);
                    for (row, &id) in ids.iter().enumerate() {
                        for c in 0..e {
                            slot[id * e + c] += g[row * e + c];
                        }
                    }
                }
            }
            Op::RowSelect { x, ids } => {
                let x = *x;
                let cols = self.nodes[x.0].value.cols();
                if self.nodes[x.0].requires_grad {
                    let len = self.nodes[x.0].value.len();
                    let slot = sweep[x.0].get_or_insert_with(|| vec![0.0; len]);
                    for (r, &j) in ids.iter().enumerate() {
                        slot[r * cols + j] += g[r];
                    }
                }
            }
            &Op::LogSoftmax(a) => {
                let yd = self.nodes[i].value.data();
                let cols = self.nodes[i].value.cols();
                let rows = yd.len() / cols;
                let mut rowsum = vec![0.0; rows];
                for (r, rs) in rowsum.iter_mut().enumerate() {
                    *rs = g[r * cols..(r + 1) * cols].iter().sum();
                }
                self.accum(sweep, a, |k| g[k] - yd[k].exp() * rowsum[k / cols]);
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                let md = mask.data();
                self.accum(sweep, x, |k| g[k] * md[k]);
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Overflow-free softplus: `max(x, 0) + ln(1 + exp(-|x|))`.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Dense row-major matrix product used by the `matmul` node and by
/// value-level helpers elsewhere in the crate.
pub(crate) fn matmul_dense(a: &Tensor, b: &Tensor, op: &'static str) -> Result<Tensor> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    debug_assert_eq!(k, b.rows());
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    par::fill_rows(&mut out, n, k * n, |r, row| {
        let arow = &ad[r * k..(r + 1) * k];
        for (j, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &bd[j * n..(j + 1) * n];
            for (slot, &bv) in row.iter_mut().zip(brow) {
                *slot += av * bv;
            }
        }
    });
    Tensor::checked(vec![m, n], out, op)
}
