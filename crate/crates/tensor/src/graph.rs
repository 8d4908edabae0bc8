use std::collections::{BTreeMap, HashMap};

use crate::store::{ParamId, ParameterStore};
use crate::{Error, Result, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleByElem(Var, Var, usize),
    Relu(Var),
    Softmax(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScaleRows(Var, Vec<f64>),
    Sum(Var),
    SumSq(Var),
    Mse(Var, Var),
    LayerNorm(Var, Vec<f64>),
    CrossEntropy(Var, Vec<usize>, Vec<f64>),
    CandidateLogits {
        query: Var,
        table: Var,
        time: Var,
        candidates: Vec<usize>,
        per_row: usize,
    },
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// A single-use tape. Values of parameters are read from the borrowed store.
pub struct Graph<'s> {
    store: &'s ParameterStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Output of [`Graph::backward`]: gradients of parameters and free variables.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Vec<f64>>,
    vars: HashMap<Var, Vec<f64>>,
}

impl Gradients {
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn var(&self, v: Var) -> Option<&[f64]> {
        self.vars.get(&v).map(Vec::as_slice)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise softmax. `mask[i] == false` excludes entry `i`; a row with no
/// admissible entry yields zeros. Entries equal to `+inf` share all the mass.
fn softmax_rows(x: &[f64], rows: usize, cols: usize, mask: Option<&[bool]>) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let xs = &x[r * cols..(r + 1) * cols];
        let keep = |j: usize| mask.map_or(true, |m| m[r * cols + j]);
        let max = (0..cols)
            .filter(|&j| keep(j))
            .map(|j| xs[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[r * cols..(r + 1) * cols];
        if max == f64::NEG_INFINITY {
            continue;
        }
        if max == f64::INFINITY {
            let hits: Vec<usize> = (0..cols).filter(|&j| keep(j) && xs[j] == f64::INFINITY).collect();
            let share = 1.0 / hits.len() as f64;
            for j in hits {
                o[j] = share;
            }
            continue;
        }
        let mut total = 0.0;
        for j in 0..cols {
            if keep(j) {
                let e = (xs[j] - max).exp();
                o[j] = e;
                total += e;
            }
        }
        for v in o.iter_mut() {
            *v /= total;
        }
    }
    out
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParameterStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParameterStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.get(*id),
        }
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            needs_grad: self.store.is_trainable(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var> {
        let id = self.store.id(name)?;
        Ok(self.param(id))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Free leaf that receives a gradient (reported through [`Gradients::var`]).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2()?;
        let (k2, n) = tb.dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2()?;
        let (n, k2) = tb.dims2()?;
        if k != k2 {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &ta.data()[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(ar, &tb.data()[j * k..(j + 1) * k]);
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), ng))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, a: Var, row: Var, name: &'static str, mul: bool) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (m, n) = ta.dims2()?;
        if tr.dims2()? != (1, n) {
            return Err(shape_err(name, ta, tr));
        }
        let mut data = ta.data().to_vec();
        for i in 0..m {
            for (x, r) in data[i * n..(i + 1) * n].iter_mut().zip(tr.data()) {
                if mul {
                    *x *= r;
                } else {
                    *x += r;
                }
            }
        }
        let ng = self.ng(a) || self.ng(row);
        let op = if mul { Op::MulRow(a, row) } else { Op::AddRow(a, row) };
        Ok(self.push(Tensor::new(vec![m, n], data)?, op, ng))
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, "add_row", false)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, "mul_row", true)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("shape preserved");
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    /// Multiplies `a` by the single element `s[index]`.
    pub fn scale_by_elem(&mut self, a: Var, s: Var, index: usize) -> Result<Var> {
        let ts = self.value(s);
        if index >= ts.len() {
            return Err(Error::IndexOutOfRange {
                index,
                len: ts.len(),
            });
        }
        let c = ts.data()[index];
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(t, Op::ScaleByElem(a, s, index), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.max(0.0)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("shape preserved");
        let ng = self.ng(a);
        self.push(t, Op::Relu(a), ng)
    }

    /// Softmax over the last axis. Entries whose mask is `false` receive
    /// exactly zero probability; fully masked rows are all zero.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.dims2()?;
        if let Some(mk) = mask {
            if mk.len() != m * n {
                return Err(Error::ShapeMismatch {
                    op: "softmax mask",
                    left: vec![m, n],
                    right: vec![mk.len()],
                });
            }
        }
        let out = softmax_rows(ta.data(), m, n, mask);
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Softmax(a), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let (m, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let t = self.value(*p);
            let (r, c) = t.dims2()?;
            if r != m {
                return Err(shape_err("concat_cols", self.value(*first), t));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(Tensor::new(vec![m, total], data)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.dims2()?;
        if start >= end || end > n {
            return Err(Error::InvalidArgument(format!("column slice {start}..{end} of width {n}")));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&ta.data()[i * n + start..i * n + end]);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![m, w], data)?, Op::SliceCols(a, start), ng))
    }

    /// Embedding lookup: row `ids[r]` of `table` becomes row `r`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, cols) = tt.dims2()?;
        if ids.is_empty() {
            return Err(Error::InvalidArgument("gather of no rows".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::IndexOutOfRange { index: id, len: rows });
            }
            data.extend_from_slice(tt.row_slice(id));
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), cols], data)?,
            Op::GatherRows(table, ids.to_vec()),
            ng,
        ))
    }

    /// Multiplies row `r` by `factors[r]` (used as a row mask).
    pub fn scale_rows(&mut self, a: Var, factors: &[f64]) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.dims2()?;
        if factors.len() != m {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                left: vec![m, n],
                right: vec![factors.len()],
            });
        }
        let mut data = ta.data().to_vec();
        for (i, f) in factors.iter().enumerate() {
            for x in &mut data[i * n..(i + 1) * n] {
                *x *= f;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::ScaleRows(a, factors.to_vec()), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Squared Euclidean norm of all entries.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumSq(a), ng)
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mse", ta, tb));
        }
        let n = ta.len() as f64;
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), ng))
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.dims2()?;
        let mut data = vec![0.0; m * n];
        let mut inv = Vec::with_capacity(m);
        for i in 0..m {
            let row = ta.row_slice(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, x) in data[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (x - mean) * is;
            }
            inv.push(is);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::LayerNorm(a, inv), ng))
    }

    /// Mean over rows of `logsumexp(row) - row[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (m, n) = tl.dims2()?;
        if targets.len() != m || targets.iter().any(|&t| t >= n) {
            return Err(Error::InvalidArgument("cross-entropy targets".into()));
        }
        let probs = softmax_rows(tl.data(), m, n, None);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = tl.row_slice(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(total / m as f64),
            Op::CrossEntropy(logits, targets.to_vec(), probs),
            ng,
        ))
    }

    /// Scores candidate items against a query that is split into an item half
    /// and a time half: `out[p][c] = q[p][..d]·table[cand[p][c]] + q[p][d..]·time[p]`.
    /// `candidates` holds `per_row` ids for every query row.
    pub fn candidate_logits(&mut self, query: Var, table: Var, time: Var, candidates: &[usize], per_row: usize) -> Result<Var> {
        let (tq, tt, tm) = (self.value(query), self.value(table), self.value(time));
        let (p, w) = tq.dims2()?;
        let (rows, d) = tt.dims2()?;
        if w != 2 * d {
            return Err(shape_err("candidate_logits", tq, tt));
        }
        if tm.dims2()? != (p, d) {
            return Err(shape_err("candidate_logits", tq, tm));
        }
        if per_row == 0 || candidates.len() != p * per_row {
            return Err(Error::InvalidArgument("candidate count".into()));
        }
        let mut out = vec![0.0; p * per_row];
        for r in 0..p {
            let q = tq.row_slice(r);
            let time_part = dot(&q[d..], tm.row_slice(r));
            for c in 0..per_row {
                let id = candidates[r * per_row + c];
                if id >= rows {
                    return Err(Error::IndexOutOfRange { index: id, len: rows });
                }
                out[r * per_row + c] = dot(&q[..d], tt.row_slice(id)) + time_part;
            }
        }
        let ng = self.ng(query) || self.ng(table) || self.ng(time);
        Ok(self.push(
            Tensor::new(vec![p, per_row], out)?,
            Op::CandidateLogits {
                query,
                table,
                time,
                candidates: candidates.to_vec(),
                per_row,
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar. Does not touch the store; accumulate the
    /// result with [`ParameterStore::accumulate`].
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads)?;
        }
        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.needs_grad || !matches!(node.op, Op::Leaf) {
                continue;
            }
            if let Some(g) = grads[i].take() {
                match node.value {
                    Value::Param(id) => {
                        out.params.insert(id, g);
                    }
                    Value::Owned(_) => {
                        out.vars.insert(Var(i), g);
                    }
                }
            }
        }
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let out = self.value(Var(i));
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.0].needs_grad {
                let len = self.value(v).len();
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
                f(slot);
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2()?;
                let (_, n) = tb.dims2()?;
                acc(*a, &mut |s| {
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            s[r * k + p] += dot(gr, &tb.data()[p * n..(p + 1) * n]);
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = ta.data()[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (x, gv) in s[p * n..(p + 1) * n].iter_mut().zip(gr) {
                                *x += av * gv;
                            }
                        }
                    }
                });
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2()?;
                let (n, _) = tb.dims2()?;
                acc(*a, &mut |s| {
                    for r in 0..m {
                        for j in 0..n {
                            let gv = g[r * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for (x, bv) in s[r * k..(r + 1) * k].iter_mut().zip(&tb.data()[j * k..(j + 1) * k]) {
                                *x += gv * bv;
                            }
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for r in 0..m {
                        for j in 0..n {
                            let gv = g[r * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for (x, av) in s[j * k..(j + 1) * k].iter_mut().zip(&ta.data()[r * k..(r + 1) * k]) {
                                *x += gv * av;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, &mut |s| {
                    for ((x, gv), bv) in s.iter_mut().zip(g).zip(tb.data()) {
                        *x += gv * bv;
                    }
                });
                acc(*b, &mut |s| {
                    for ((x, gv), av) in s.iter_mut().zip(g).zip(ta.data()) {
                        *x += gv * av;
                    }
                });
            }
            Op::AddRow(a, row) => {
                let (_, n) = out.dims2()?;
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*row, &mut |s| {
                    for (j, gv) in g.iter().enumerate() {
                        s[j % n] += gv;
                    }
                });
            }
            Op::MulRow(a, row) => {
                let (_, n) = out.dims2()?;
                let (ta, tr) = (self.value(*a), self.value(*row));
                acc(*a, &mut |s| {
                    for (j, (x, gv)) in s.iter_mut().zip(g).enumerate() {
                        *x += gv * tr.data()[j % n];
                    }
                });
                acc(*row, &mut |s| {
                    for (j, (gv, av)) in g.iter().zip(ta.data()).enumerate() {
                        s[j % n] += gv * av;
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::ScaleByElem(a, sv, idx) => {
                let c = self.value(*sv).data()[*idx];
                let ta = self.value(*a);
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
                acc(*sv, &mut |s| s[*idx] += dot(g, ta.data()));
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                acc(*a, &mut |s| {
                    for ((x, gv), av) in s.iter_mut().zip(g).zip(ta.data()) {
                        if *av > 0.0 {
                            *x += gv;
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let (m, n) = out.dims2()?;
                let y = out.data();
                acc(*a, &mut |s| {
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let inner = dot(yr, gr);
                        for j in 0..n {
                            s[r * n + j] += yr[j] * (gr[j] - inner);
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, total) = out.dims2()?;
                let mut offset = 0;
                for p in parts {
                    let (_, w) = self.value(*p).dims2()?;
                    let off = offset;
                    acc(*p, &mut |s| {
                        for r in 0..m {
                            for c in 0..w {
                                s[r * w + c] += g[r * total + off + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, w) = out.dims2()?;
                let (_, n) = self.value(*a).dims2()?;
                acc(*a, &mut |s| {
                    for r in 0..m {
                        for c in 0..w {
                            s[r * n + start + c] += g[r * w + c];
                        }
                    }
                });
            }
            Op::GatherRows(table, ids) => {
                let (_, cols) = out.dims2()?;
                acc(*table, &mut |s| {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            s[id * cols + c] += g[r * cols + c];
                        }
                    }
                });
            }
            Op::ScaleRows(a, factors) => {
                let (_, n) = out.dims2()?;
                acc(*a, &mut |s| {
                    for (j, (x, gv)) in s.iter_mut().zip(g).enumerate() {
                        *x += factors[j / n] * gv;
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g[0];
                acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += gv));
            }
            Op::SumSq(a) => {
                let gv = g[0];
                let ta = self.value(*a);
                acc(*a, &mut |s| {
                    for (x, av) in s.iter_mut().zip(ta.data()) {
                        *x += 2.0 * av * gv;
                    }
                });
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = 2.0 * g[0] / ta.len() as f64;
                acc(*a, &mut |s| {
                    for ((x, av), bv) in s.iter_mut().zip(ta.data()).zip(tb.data()) {
                        *x += k * (av - bv);
                    }
                });
                acc(*b, &mut |s| {
                    for ((x, av), bv) in s.iter_mut().zip(ta.data()).zip(tb.data()) {
                        *x -= k * (av - bv);
                    }
                });
            }
            Op::LayerNorm(a, inv) => {
                let (m, n) = out.dims2()?;
                let y = out.data();
                acc(*a, &mut |s| {
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let mg = gr.iter().sum::<f64>() / n as f64;
                        let mgy = dot(gr, yr) / n as f64;
                        for j in 0..n {
                            s[r * n + j] += inv[r] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                });
            }
            Op::CrossEntropy(logits, targets, probs) => {
                let (m, n) = self.value(*logits).dims2()?;
                let k = g[0] / m as f64;
                acc(*logits, &mut |s| {
                    for r in 0..m {
                        for j in 0..n {
                            let onehot = if targets[r] == j { 1.0 } else { 0.0 };
                            s[r * n + j] += k * (probs[r * n + j] - onehot);
                        }
                    }
                });
            }
            Op::CandidateLogits {
                query,
                table,
                time,
                candidates,
                per_row,
            } => {
                let (tq, tt, tm) = (self.value(*query), self.value(*table), self.value(*time));
                let (p, _) = tq.dims2()?;
                let (_, d) = tt.dims2()?;
                let row_total: Vec<f64> = (0..p).map(|r| g[r * per_row..(r + 1) * per_row].iter().sum()).collect();
                acc(*query, &mut |s| {
                    for r in 0..p {
                        for c in 0..*per_row {
                            let gv = g[r * per_row + c];
                            let emb = tt.row_slice(candidates[r * per_row + c]);
                            for k in 0..d {
                                s[r * 2 * d + k] += gv * emb[k];
                            }
                        }
                        let tr = tm.row_slice(r);
                        for k in 0..d {
                            s[r * 2 * d + d + k] += row_total[r] * tr[k];
                        }
                    }
                });
                acc(*table, &mut |s| {
                    for r in 0..p {
                        let q = tq.row_slice(r);
                        for c in 0..*per_row {
                            let gv = g[r * per_row + c];
                            let id = candidates[r * per_row + c];
                            for k in 0..d {
                                s[id * d + k] += gv * q[k];
                            }
                        }
                    }
                });
                acc(*time, &mut |s| {
                    for r in 0..p {
                        let q = tq.row_slice(r);
                        for k in 0..d {
                            s[r * d + k] += row_total[r] * q[d + k];
                        }
                    }
                });
            }
        }
        Ok(())
    }
}
