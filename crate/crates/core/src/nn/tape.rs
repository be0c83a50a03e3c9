//! Reverse-mode differentiation over 2-D row-major matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! accumulates vector-Jacobian products into every node. Tapes are cheap to
//! build and are thrown away after each optimizer step.

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// `x · wᵀ`, with `x` `[n×k]` and `w` `[m×k]`.
    MatMulT(Var, Var),
    /// Adds a `[1×m]` row to every row.
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Swish(Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    /// Output column `c` reads input column `map[c]`, or zero.
    GatherCols(Var, Vec<Option<usize>>),
    /// Each row is an `n×n` matrix `A`; output `A − Aᵀ`.
    Skew(Var, usize),
    /// Each row is an `n×n` matrix `A`; output `A·Aᵀ`.
    Gram(Var, usize),
    /// Row-wise `M_r · v_r` with `M_r` `n×n`.
    BatchedMatVec(Var, Var, usize),
    Sum(Var),
    Mean(Var),
}

#[derive(Clone, Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

/// Buffer accounting for a recorded pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TapeStats {
    /// Total entries held by reshaped operator matrices (`Skew`/`Gram` outputs).
    pub operator_entries: usize,
    /// Largest single buffer recorded.
    pub largest_buffer: usize,
    /// Sum of all buffers recorded.
    pub total_entries: usize,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    stats: TapeStats,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of the given length if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; len])
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x·σ(x)`.
#[inline]
pub fn swish_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn swish_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

/// Elementwise Swish on a plain slice.
pub fn swish(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| swish_scalar(v)).collect()
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

    pub fn stats(&self) -> TapeStats {
        self.stats
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        let n = value.len();
        self.stats.largest_buffer = self.stats.largest_buffer.max(n);
        self.stats.total_entries += n;
        if matches!(op, Op::Skew(..) | Op::Gram(..)) {
            self.stats.operator_entries += n;
        }
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients are computed for every leaf; callers read
    /// only the ones they care about.
    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        if rows * cols != value.len() {
            return Err(Error::Shape {
                context: "Tape::leaf",
                expected: rows * cols,
                actual: value.len(),
            });
        }
        Ok(self.push(rows, cols, value, Op::Leaf))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(rows, cols, vec![0.0; rows * cols], Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn same_dims(&self, a: Var, b: Var, context: &'static str) -> Result<(usize, usize)> {
        let da = self.dims(a);
        let db = self.dims(b);
        if da != db {
            return Err(Error::Shape {
                context,
                expected: da.0 * da.1,
                actual: db.0 * db.1,
            });
        }
        Ok(da)
    }

    /// `x · wᵀ`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, k) = self.dims(x);
        let (m, kw) = self.dims(w);
        if k != kw {
            return Err(Error::Shape {
                context: "matmul_t (input dim vs weight in-dim)",
                expected: kw,
                actual: k,
            });
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let xr = &xv[r * k..(r + 1) * k];
            let or = &mut out[r * m..(r + 1) * m];
            for (o, slot) in or.iter_mut().enumerate() {
                let wr = &wv[o * k..(o + 1) * k];
                *slot = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        Ok(self.push(n, m, out, Op::MatMulT(x, w)))
    }

    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = self.dims(x);
        let (br, bc) = self.dims(b);
        if br * bc != m {
            return Err(Error::Shape {
                context: "add_row (bias length)",
                expected: m,
                actual: br * bc,
            });
        }
        let bv = self.value(b).to_vec();
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(m.max(1)) {
            for (o, bb) in row.iter_mut().zip(&bv) {
                *o += bb;
            }
        }
        Ok(self.push(n, m, out, Op::AddRow(x, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(r, c, out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims(a, b, "sub")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(r, c, out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(r, c, out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| x * s).collect();
        self.push(r, c, out, Op::Scale(a, s))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| x * x).collect();
        self.push(r, c, out, Op::Square(a))
    }

    pub fn swish(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = swish(self.value(a));
        self.push(r, c, out, Op::Swish(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.dims(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(Error::Shape {
                    context: "concat_cols (row count)",
                    expected: rows,
                    actual: r,
                });
            }
            cols += c;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let c = self.nodes[p.0].cols;
                out.extend_from_slice(&self.nodes[p.0].value[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(rows, cols, out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (n, c) = self.dims(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(format!(
                "gather_rows index {bad} out of range for {n} rows"
            )));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        Ok(self.push(idx.len(), c, out, Op::GatherRows(a, idx.to_vec())))
    }

    /// `out[idx[r]] += a[r]`, accumulated in row order.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], n_out: usize) -> Result<Var> {
        let (n, c) = self.dims(a);
        if idx.len() != n {
            return Err(Error::Shape {
                context: "scatter_add_rows (index count)",
                expected: n,
                actual: idx.len(),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_out) {
            return Err(Error::Contract(format!(
                "scatter_add_rows index {bad} out of range for {n_out} rows"
            )));
        }
        let av = self.value(a);
        let mut out = vec![0.0; n_out * c];
        for (r, &i) in idx.iter().enumerate() {
            for (o, x) in out[i * c..(i + 1) * c].iter_mut().zip(&av[r * c..(r + 1) * c]) {
                *o += x;
            }
        }
        Ok(self.push(n_out, c, out, Op::ScatterAddRows(a, idx.to_vec())))
    }

    pub fn gather_cols(&mut self, a: Var, map: &[Option<usize>]) -> Result<Var> {
        let (n, c) = self.dims(a);
        if let Some(bad) = map.iter().flatten().find(|&&k| k >= c) {
            return Err(Error::Contract(format!(
                "gather_cols column {bad} out of range for {c} columns"
            )));
        }
        let av = self.value(a);
        let m = map.len();
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            for (j, src) in map.iter().enumerate() {
                if let Some(k) = src {
                    out[r * m + j] = av[r * c + k];
                }
            }
        }
        Ok(self.push(n, m, out, Op::GatherCols(a, map.to_vec())))
    }

    fn check_square_rows(&self, a: Var, n: usize, context: &'static str) -> Result<usize> {
        let (rows, c) = self.dims(a);
        if c != n * n {
            return Err(Error::Shape {
                context,
                expected: n * n,
                actual: c,
            });
        }
        Ok(rows)
    }

    pub fn skew(&mut self, a: Var, n: usize) -> Result<Var> {
        let rows = self.check_square_rows(a, n, "skew (row is not n×n)")?;
        let av = self.value(a);
        let nn = n * n;
        let mut out = vec![0.0; rows * nn];
        for r in 0..rows {
            let src = &av[r * nn..(r + 1) * nn];
            let dst = &mut out[r * nn..(r + 1) * nn];
            for i in 0..n {
                for j in 0..n {
                    dst[i * n + j] = src[i * n + j] - src[j * n + i];
                }
            }
        }
        Ok(self.push(rows, nn, out, Op::Skew(a, n)))
    }

    pub fn gram(&mut self, a: Var, n: usize) -> Result<Var> {
        let rows = self.check_square_rows(a, n, "gram (row is not n×n)")?;
        let av = self.value(a);
        let nn = n * n;
        let mut out = vec![0.0; rows * nn];
        for r in 0..rows {
            let src = &av[r * nn..(r + 1) * nn];
            let dst = &mut out[r * nn..(r + 1) * nn];
            for i in 0..n {
                for j in 0..=i {
                    let v: f64 = (0..n).map(|k| src[i * n + k] * src[j * n + k]).sum();
                    dst[i * n + j] = v;
                    dst[j * n + i] = v;
                }
            }
        }
        Ok(self.push(rows, nn, out, Op::Gram(a, n)))
    }

    pub fn batched_matvec(&mut self, mats: Var, vecs: Var, n: usize) -> Result<Var> {
        let rows = self.check_square_rows(mats, n, "batched_matvec (matrix row)")?;
        let (vr, vc) = self.dims(vecs);
        if vr != rows || vc != n {
            return Err(Error::Shape {
                context: "batched_matvec (vector rows)",
                expected: rows * n,
                actual: vr * vc,
            });
        }
        let mv = self.value(mats);
        let vv = self.value(vecs);
        let nn = n * n;
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let m = &mv[r * nn..(r + 1) * nn];
            let v = &vv[r * n..(r + 1) * n];
            for i in 0..n {
                out[r * n + i] = m[i * n..(i + 1) * n].iter().zip(v).map(|(a, b)| a * b).sum();
            }
        }
        Ok(self.push(rows, n, out, Op::BatchedMatVec(mats, vecs, n)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(1, 1, vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        self.push(1, 1, vec![s], Op::Mean(a))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.dims(loss);
        if r * c != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got a {r}×{c} node"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMulT(x, w) => {
                    let (n, k) = self.dims(*x);
                    let m = node.cols;
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let mut dx = vec![0.0; n * k];
                    let mut dw = vec![0.0; m * k];
                    for r in 0..n {
                        let xr = &xv[r * k..(r + 1) * k];
                        let dxr = &mut dx[r * k..(r + 1) * k];
                        for o in 0..m {
                            let go = g[r * m + o];
                            if go == 0.0 {
                                continue;
                            }
                            let wr = &wv[o * k..(o + 1) * k];
                            for (d, w) in dxr.iter_mut().zip(wr) {
                                *d += go * w;
                            }
                            for (d, xx) in dw[o * k..(o + 1) * k].iter_mut().zip(xr) {
                                *d += go * xx;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                }
                Op::AddRow(x, b) => {
                    let m = node.cols;
                    let mut db = vec![0.0; m];
                    for row in g.chunks(m.max(1)) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *b, db);
                    accumulate(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.iter().map(|v| -v).collect());
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let da = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                    let db = g.iter().zip(av).map(|(g, a)| g * a).collect();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, *a, g.iter().map(|v| v * s).collect());
                }
                Op::Square(a) => {
                    let av = self.value(*a);
                    let da = g.iter().zip(av).map(|(g, a)| 2.0 * a * g).collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::Swish(a) => {
                    let av = self.value(*a);
                    let da = g.iter().zip(av).map(|(g, &a)| g * swish_grad(a)).collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let rows = node.rows;
                    let total = node.cols;
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.nodes[p.0].cols;
                        let mut dp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        accumulate(&mut grads, p, dp);
                        offset += c;
                    }
                }
                Op::GatherRows(a, ids) => {
                    let (n, c) = self.dims(*a);
                    let mut da = vec![0.0; n * c];
                    for (r, &i) in ids.iter().enumerate() {
                        for (d, v) in da[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::ScatterAddRows(a, ids) => {
                    let c = node.cols;
                    let mut da = Vec::with_capacity(ids.len() * c);
                    for &i in ids {
                        da.extend_from_slice(&g[i * c..(i + 1) * c]);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::GatherCols(a, map) => {
                    let (n, c) = self.dims(*a);
                    let m = map.len();
                    let mut da = vec![0.0; n * c];
                    for r in 0..n {
                        for (j, src) in map.iter().enumerate() {
                            if let Some(k) = src {
                                da[r * c + k] += g[r * m + j];
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Skew(a, n) => {
                    let n = *n;
                    let nn = n * n;
                    let mut da = vec![0.0; g.len()];
                    for (dst, src) in da.chunks_mut(nn).zip(g.chunks(nn)) {
                        for i in 0..n {
                            for j in 0..n {
                                dst[i * n + j] = src[i * n + j] - src[j * n + i];
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Gram(a, n) => {
                    // d(A Aᵀ) = (G + Gᵀ) A
                    let n = *n;
                    let nn = n * n;
                    let av = self.value(*a);
                    let mut da = vec![0.0; g.len()];
                    for r in 0..node.rows {
                        let gr = &g[r * nn..(r + 1) * nn];
                        let ar = &av[r * nn..(r + 1) * nn];
                        let dr = &mut da[r * nn..(r + 1) * nn];
                        for i in 0..n {
                            for j in 0..n {
                                let s = gr[i * n + j] + gr[j * n + i];
                                if s == 0.0 {
                                    continue;
                                }
                                for k in 0..n {
                                    dr[i * n + k] += s * ar[j * n + k];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::BatchedMatVec(mats, vecs, n) => {
                    let n = *n;
                    let nn = n * n;
                    let mv = self.value(*mats);
                    let vv = self.value(*vecs);
                    let rows = node.rows;
                    let mut dm = vec![0.0; rows * nn];
                    let mut dv = vec![0.0; rows * n];
                    for r in 0..rows {
                        let gr = &g[r * n..(r + 1) * n];
                        let v = &vv[r * n..(r + 1) * n];
                        let m = &mv[r * nn..(r + 1) * nn];
                        for i in 0..n {
                            for j in 0..n {
                                dm[r * nn + i * n + j] = gr[i] * v[j];
                                dv[r * n + j] += m[i * n + j] * gr[i];
                            }
                        }
                    }
                    accumulate(&mut grads, *mats, dm);
                    accumulate(&mut grads, *vecs, dv);
                }
                Op::Sum(a) => {
                    let len = self.nodes[a.0].value.len();
                    accumulate(&mut grads, *a, vec![g[0]; len]);
                }
                Op::Mean(a) => {
                    let len = self.nodes[a.0].value.len();
                    accumulate(&mut grads, *a, vec![g[0] / len.max(1) as f64; len]);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}
