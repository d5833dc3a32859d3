//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every value on the tape is a `rows x cols` matrix; vectors are single
//! rows and scalars are `1 x 1`. Nodes are appended in evaluation order, so
//! the tape order is a topological order and [`Graph::backward`] walks it
//! in reverse, visiting each node once.

use std::borrow::Cow;

use crate::error::{invalid, Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Gelu(Var),
    Softmax(Var),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    MeanRows { x: Var, groups: Vec<Vec<usize>> },
    MeanAll(Var),
    SumAll(Var),
}

#[derive(Debug)]
struct Node<'a> {
    rows: usize,
    cols: usize,
    value: Cow<'a, [f64]>,
    op: Op,
    needs_grad: bool,
}

/// The tape. `'a` is the lifetime of borrowed leaf data (parameters).
#[derive(Debug)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grad_enabled: bool,
    macs: u64,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            macs: 0,
        }
    }

    /// A tape that never tracks gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Multiply-accumulates performed by matrix products so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        match self.shape(v) {
            (1, 1) => Ok(self.value(v)[0]),
            (r, c) => Err(Error::ShapeMismatch {
                op: "scalar",
                left: vec![r, c],
                right: vec![1, 1],
            }),
        }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Cow<'a, [f64]>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf_checked(
        &mut self,
        rows: usize,
        cols: usize,
        value: Cow<'a, [f64]>,
        requires_grad: bool,
    ) -> Result<Var> {
        if rows * cols != value.len() || rows == 0 || cols == 0 {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                left: vec![rows, cols],
                right: vec![value.len()],
            });
        }
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push(rows, cols, value, Op::Leaf, requires_grad))
    }

    /// Owned input that never receives a gradient.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        self.leaf_checked(rows, cols, Cow::Owned(data), false)
    }

    /// Owned leaf, optionally differentiable.
    pub fn variable(&mut self, rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        self.leaf_checked(rows, cols, Cow::Owned(data), requires_grad)
    }

    /// Borrowed leaf (typically a parameter tensor).
    pub fn borrowed(&mut self, rows: usize, cols: usize, data: &'a [f64], requires_grad: bool) -> Result<Var> {
        self.leaf_checked(rows, cols, Cow::Borrowed(data), requires_grad)
    }

    fn finish(&mut self, name: &'static str, rows: usize, cols: usize, data: Vec<f64>, op: Op, parents: &[Var]) -> Result<Var> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push(rows, cols, Cow::Owned(data), op, needs))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: vec![sa.0, sa.1],
                right: vec![sb.0, sb.1],
            });
        }
        Ok(sa)
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let out = gemm(self.value(a), self.value(b), m, k, n);
        self.macs += (m * k * n) as u64;
        self.finish("matmul", m, n, out, Op::MatMul(a, b), &[a, b])
    }

    /// `a[m,k] · b[n,k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                left: vec![m, k],
                right: vec![n, k2],
            });
        }
        let out = gemm_nt(self.value(a), self.value(b), m, k, n);
        self.macs += (m * k * n) as u64;
        self.finish("matmul_nt", m, n, out, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.finish("add", r, c, out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.finish("sub", r, c, out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.finish("mul", r, c, out, Op::Mul(a, b), &[a, b])
    }

    fn row_operand(&self, op: &'static str, x: Var, row: Var) -> Result<(usize, usize)> {
        let ((r, c), (rr, rc)) = (self.shape(x), self.shape(row));
        if rr != 1 || rc != c {
            return Err(Error::ShapeMismatch {
                op,
                left: vec![r, c],
                right: vec![rr, rc],
            });
        }
        Ok((r, c))
    }

    /// Bias add: `x[r,c] + row[1,c]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.row_operand("add_row", x, row)?;
        let (xv, rv) = (self.value(x), self.value(row));
        let out = (0..r * c).map(|i| xv[i] + rv[i % c]).collect();
        self.finish("add_row", r, c, out, Op::AddRow(x, row), &[x, row])
    }

    /// Row-broadcast scaling `x[r,c] ⊙ row[1,c]`, used for modulation gates.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.row_operand("mul_row", x, row)?;
        let (xv, rv) = (self.value(x), self.value(row));
        let out = (0..r * c).map(|i| xv[i] * rv[i % c]).collect();
        self.finish("mul_row", r, c, out, Op::MulRow(x, row), &[x, row])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|v| v * s).collect();
        self.finish("scale", r, c, out, Op::Scale(x, s), &[x])
    }

    /// Per-row normalisation to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let xv = self.value(x);
        let mut out = vec![0.0; r * c];
        let mut rstd = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * s;
            }
            rstd.push(s);
        }
        self.finish("layer_norm", r, c, out, Op::LayerNorm { x, rstd }, &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let out = self
            .value(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        self.finish("gelu", r, c, out, Op::Gelu(x), &[x])
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let out = softmax_rows_raw(self.value(x), r, c);
        self.finish("softmax_rows", r, c, out, Op::Softmax(x), &[x])
    }

    /// Stack along the token (row) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid("concat_rows of nothing"))?;
        let c = self.shape(first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pc != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![rows, c],
                    right: vec![pr, pc],
                });
            }
            rows += pr;
            out.extend_from_slice(self.value(p));
        }
        self.finish("concat_rows", rows, c, out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if len == 0 || start + len > r {
            return Err(invalid(format!("slice_rows {start}+{len} out of {r}")));
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        self.finish("slice_rows", len, c, out, Op::SliceRows { x, start }, &[x])
    }

    /// Stack along the feature (column) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid("concat_cols of nothing"))?;
        let r = self.shape(first).0;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pr != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![r, total],
                    right: vec![pr, pc],
                });
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let pc = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        self.finish("concat_cols", r, total, out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if len == 0 || start + len > c {
            return Err(invalid(format!("slice_cols {start}+{len} out of {c}")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        self.finish("slice_cols", r, len, out, Op::SliceCols { x, start }, &[x])
    }

    /// Embedding lookup: row `i` of the output is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.shape(table);
        if ids.is_empty() {
            return Err(invalid("gather_rows with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(invalid(format!("token id {bad} outside table of {v} rows")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
        };
        self.finish("gather_rows", ids.len(), d, out, op, &[table])
    }

    /// Mean over an index mask: output row `g` is the mean of the rows of
    /// `x` listed in `groups[g]`.
    pub fn mean_rows(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if groups.is_empty() || groups.iter().any(|g| g.is_empty()) {
            return Err(invalid("mean_rows needs non-empty groups"));
        }
        if groups.iter().flatten().any(|&i| i >= r) {
            return Err(invalid(format!("mean_rows index outside {r} rows")));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; groups.len() * c];
        for (g, rows) in groups.iter().enumerate() {
            let w = 1.0 / rows.len() as f64;
            for &i in rows {
                for j in 0..c {
                    out[g * c + j] += w * xv[i * c + j];
                }
            }
        }
        let op = Op::MeanRows {
            x,
            groups: groups.to_vec(),
        };
        self.finish("mean_rows", groups.len(), c, out, op, &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.finish("mean_all", 1, 1, vec![m], Op::MeanAll(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum::<f64>();
        self.finish("sum_all", 1, 1, vec![s], Op::SumAll(x), &[x])
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let (r, c) = self.shape(root);
        if (r, c) != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "backward",
                left: vec![r, c],
                right: vec![1, 1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ((m, k), n) = (self.shape(*a), cols);
                if self.nodes[a.0].needs_grad {
                    let ga = gemm_nt(g, self.value(*b), m, n, k);
                    self.acc(grads, *a, |t| axpy(t, &ga));
                }
                if self.nodes[b.0].needs_grad {
                    let gb = gemm_tn(self.value(*a), g, m, k, n);
                    self.acc(grads, *b, |t| axpy(t, &gb));
                }
            }
            Op::MatMulNt(a, b) => {
                let ((m, k), n) = (self.shape(*a), cols);
                if self.nodes[a.0].needs_grad {
                    let ga = gemm(g, self.value(*b), m, n, k);
                    self.acc(grads, *a, |t| axpy(t, &ga));
                }
                if self.nodes[b.0].needs_grad {
                    let gb = gemm_tn(g, self.value(*a), m, n, k);
                    self.acc(grads, *b, |t| axpy(t, &gb));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |t| axpy(t, g));
                self.acc(grads, *b, |t| axpy(t, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |t| axpy(t, g));
                self.acc(grads, *b, |t| t.iter_mut().zip(g).for_each(|(t, g)| *t -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |t| {
                    t.iter_mut().zip(g.iter().zip(bv)).for_each(|(t, (g, b))| *t += g * b)
                });
                self.acc(grads, *b, |t| {
                    t.iter_mut().zip(g.iter().zip(av)).for_each(|(t, (g, a))| *t += g * a)
                });
            }
            Op::AddRow(x, row) => {
                self.acc(grads, *x, |t| axpy(t, g));
                self.acc(grads, *row, |t| {
                    for (i, gv) in g.iter().enumerate() {
                        t[i % cols] += gv;
                    }
                });
            }
            Op::MulRow(x, row) => {
                let (xv, rv) = (self.value(*x), self.value(*row));
                self.acc(grads, *x, |t| {
                    for (i, gv) in g.iter().enumerate() {
                        t[i] += gv * rv[i % cols];
                    }
                });
                self.acc(grads, *row, |t| {
                    for (i, gv) in g.iter().enumerate() {
                        t[i % cols] += gv * xv[i];
                    }
                });
            }
            Op::Scale(x, s) => self.acc(grads, *x, |t| t.iter_mut().zip(g).for_each(|(t, g)| *t += s * g)),
            Op::LayerNorm { x, rstd } => {
                let y = &node.value;
                self.acc(grads, *x, |t| {
                    for i in 0..rows {
                        let gr = &g[i * cols..(i + 1) * cols];
                        let yr = &y[i * cols..(i + 1) * cols];
                        let mg = gr.iter().sum::<f64>() / cols as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for j in 0..cols {
                            t[i * cols + j] += rstd[i] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                self.acc(grads, *x, |t| {
                    for ((t, &v), gv) in t.iter_mut().zip(xv).zip(g) {
                        let u = GELU_C * (v + GELU_A * v * v * v);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *t += gv * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = &node.value;
                self.acc(grads, *x, |t| {
                    for i in 0..rows {
                        let gr = &g[i * cols..(i + 1) * cols];
                        let yr = &y[i * cols..(i + 1) * cols];
                        let dot = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>();
                        for j in 0..cols {
                            t[i * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    self.acc(grads, p, |t| axpy(t, &g[off..off + len]));
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let c = cols;
                self.acc(grads, *x, |t| axpy(&mut t[start * c..(start + rows) * c], g));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    self.acc(grads, p, |t| {
                        for i in 0..rows {
                            axpy(&mut t[i * pc..(i + 1) * pc], &g[i * cols + off..i * cols + off + pc]);
                        }
                    });
                    off += pc;
                }
            }
            Op::SliceCols { x, start } => {
                let xc = self.shape(*x).1;
                self.acc(grads, *x, |t| {
                    for i in 0..rows {
                        axpy(&mut t[i * xc + start..i * xc + start + cols], &g[i * cols..(i + 1) * cols]);
                    }
                });
            }
            Op::Gather { table, ids } => {
                self.acc(grads, *table, |t| {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut t[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::MeanRows { x, groups } => {
                self.acc(grads, *x, |t| {
                    for (gi, members) in groups.iter().enumerate() {
                        let w = 1.0 / members.len() as f64;
                        for &i in members {
                            for j in 0..cols {
                                t[i * cols + j] += w * g[gi * cols + j];
                            }
                        }
                    }
                });
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].value.len() as f64;
                self.acc(grads, *x, |t| t.iter_mut().for_each(|t| *t += g[0] / n));
            }
            Op::SumAll(x) => self.acc(grads, *x, |t| t.iter_mut().for_each(|t| *t += g[0])),
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], target: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[target.0];
        if !node.needs_grad {
            return;
        }
        let slot = grads[target.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(slot);
    }
}

/// Gradients from one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if `v` was reached.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn axpy(t: &mut [f64], g: &[f64]) {
    t.iter_mut().zip(g).for_each(|(t, g)| *t += g);
}

pub(crate) fn softmax_rows_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x[i * c..(i + 1) * c];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..c {
            let e = (row[j] - m).exp();
            out[i * c + j] = e;
            sum += e;
        }
        out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// `a[m,k] · b[k,n]`.
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, b)| *o += s * b);
        }
    }
    out
}

/// `a[m,k] · b[n,k]ᵀ`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
    out
}

/// `a[m,k]ᵀ · b[m,n]`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            out[p * n..(p + 1) * n].iter_mut().zip(brow).for_each(|(o, b)| *o += s * b);
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorise the reduction.
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = acc[0] + acc[1] + acc[2] + acc[3];
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}
