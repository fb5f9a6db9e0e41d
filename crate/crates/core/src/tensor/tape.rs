use std::sync::atomic::{AtomicU64, Ordering};

use super::{matmul_plain, Tensor, TensorError};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TAPE.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRow(usize, usize),
    RepeatRows(usize),
    Mul(usize, usize),
    MulConst(usize, Tensor),
    AddConst(usize),
    Scale(usize, f64),
    SoftmaxRows(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Tensor, rstd: Vec<f64> },
    Gelu(usize),
    GatherRows { table: usize, ids: Vec<usize> },
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SelectRows { x: usize, rows: Vec<usize> },
    MeanRows { x: usize, rows: Vec<usize> },
    NormalizeRows { x: usize, norms: Vec<f64> },
    Sum(usize),
    CrossEntropy { logits: usize, targets: Vec<Option<usize>>, probs: Tensor, count: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records forward operations in topological order for reverse-mode
/// differentiation. Single writer; [`Tape::backward`] clears it.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of every `requires_grad` leaf, produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get_mut(var.index).and_then(Option::take)
    }
}

fn finite(op: &'static str, t: Tensor) -> Result<Tensor, TensorError> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape { op, left: a.shape().to_vec(), right: b.shape().to_vec() }
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: fresh_id(), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after `len`. Vars created after that point
    /// become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn idx(&self, v: Var) -> Result<usize, TensorError> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "var from another tape");
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = finite("matmul", matmul_plain(&self.nodes[ia].value, &self.nodes[ib].value)?)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, rg, Op::MatMul(ia, ib)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.transpose();
        let rg = self.rg(ia);
        Ok(self.push(out, rg, Op::Transpose(ia)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if x.dims() != y.dims() {
            return Err(shape_err("add", x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = finite("add", Tensor::new(x.shape().to_vec(), data)?)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, rg, Op::Add(ia, ib)))
    }

    /// `x (m x n) + row (1 x n)` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        let (ix, ir) = (self.idx(x)?, self.idx(row)?);
        let (xv, rv) = (&self.nodes[ix].value, &self.nodes[ir].value);
        let (m, n) = xv.dims();
        if rv.numel() != n {
            return Err(shape_err("add_row", xv, rv));
        }
        let mut data = xv.data().to_vec();
        for r in 0..m {
            for (d, b) in data[r * n..(r + 1) * n].iter_mut().zip(rv.data()) {
                *d += b;
            }
        }
        let out = finite("add_row", Tensor::matrix(m, n, data)?)?;
        let rg = self.rg(ix) || self.rg(ir);
        Ok(self.push(out, rg, Op::AddRow(ix, ir)))
    }

    /// Broadcasts a `1 x n` row to `m x n`.
    pub fn repeat_rows(&mut self, row: Var, m: usize) -> Result<Var, TensorError> {
        let ir = self.idx(row)?;
        let rv = &self.nodes[ir].value;
        if rv.rows() != 1 || m == 0 {
            return Err(TensorError::Invalid(format!("repeat_rows needs a single row, got {:?}", rv.shape())));
        }
        let n = rv.cols();
        let out = Tensor::matrix(m, n, rv.data().repeat(m))?;
        let rg = self.rg(ir);
        Ok(self.push(out, rg, Op::RepeatRows(ir)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if x.dims() != y.dims() {
            return Err(shape_err("mul", x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = finite("mul", Tensor::new(x.shape().to_vec(), data)?)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, rg, Op::Mul(ia, ib)))
    }

    /// Elementwise product with a constant (used for dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        if x.dims() != c.dims() {
            return Err(shape_err("mul_const", x, &c));
        }
        let data = x.data().iter().zip(c.data()).map(|(p, q)| p * q).collect();
        let out = finite("mul_const", Tensor::new(x.shape().to_vec(), data)?)?;
        let rg = self.rg(ia);
        Ok(self.push(out, rg, Op::MulConst(ia, c)))
    }

    /// Elementwise sum with a constant (used for additive attention masks).
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        if x.dims() != c.dims() {
            return Err(shape_err("add_const", x, c));
        }
        let data = x.data().iter().zip(c.data()).map(|(p, q)| p + q).collect();
        let out = finite("add_const", Tensor::new(x.shape().to_vec(), data)?)?;
        let rg = self.rg(ia);
        Ok(self.push(out, rg, Op::AddConst(ia)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let out = finite("scale", self.nodes[ia].value.map(|v| v * s))?;
        let rg = self.rg(ia);
        Ok(self.push(out, rg, Op::Scale(ia, s)))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        let (m, n) = x.dims();
        let mut data = x.data().to_vec();
        for r in 0..m {
            softmax_in_place(&mut data[r * n..(r + 1) * n]);
        }
        let out = finite("softmax_rows", Tensor::new(x.shape().to_vec(), data)?)?;
        let rg = self.rg(ia);
        Ok(self.push(out, rg, Op::SoftmaxRows(ia)))
    }

    /// Per-row standardization followed by `gain * xhat + bias`.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        if !(eps > 0.0) {
            return Err(TensorError::Invalid(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gain)?, self.idx(bias)?);
        let xv = &self.nodes[ix].value;
        let (m, n) = xv.dims();
        let (g, b) = (&self.nodes[ig].value, &self.nodes[ib].value);
        if g.numel() != n {
            return Err(shape_err("layer_norm gain", xv, g));
        }
        if b.numel() != n {
            return Err(shape_err("layer_norm bias", xv, b));
        }
        let mut xhat = vec![0.0; m * n];
        let mut out = vec![0.0; m * n];
        let mut rstd = Vec::with_capacity(m);
        for r in 0..m {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g.data()[c] + b.data()[c];
            }
        }
        let out = finite("layer_norm_rows", Tensor::matrix(m, n, out)?)?;
        let rg = self.rg(ix) || self.rg(ig) || self.rg(ib);
        let xhat = Tensor::matrix(m, n, xhat)?;
        Ok(self.push(out, rg, Op::LayerNorm { x: ix, gain: ig, bias: ib, xhat, rstd }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let out = finite("gelu", self.nodes[ia].value.map(gelu))?;
        let rg = self.rg(ia);
        Ok(self.push(out, rg, Op::Gelu(ia)))
    }

    /// Embedding lookup: rows `ids` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let it = self.idx(table)?;
        let tv = &self.nodes[it].value;
        let (v, d) = tv.dims();
        if ids.is_empty() {
            return Err(TensorError::Invalid("gather_rows needs at least one id".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for (pos, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(TensorError::TargetOutOfRange { position: pos, id, vocab: v });
            }
            data.extend_from_slice(tv.row_slice(id));
        }
        let out = Tensor::matrix(ids.len(), d, data)?;
        let rg = self.rg(it);
        Ok(self.push(out, rg, Op::GatherRows { table: it, ids: ids.to_vec() }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let ix = self.idx(x)?;
        let xv = &self.nodes[ix].value;
        let (m, n) = xv.dims();
        if len == 0 || start + len > n {
            return Err(TensorError::Invalid(format!("column slice {start}..{} of {n}", start + len)));
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&xv.data()[r * n + start..r * n + start + len]);
        }
        let out = Tensor::matrix(m, len, data)?;
        let rg = self.rg(ix);
        Ok(self.push(out, rg, Op::SliceCols { x: ix, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let idxs = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>, _>>()?;
        let first = idxs.first().ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?;
        let m = self.nodes[*first].value.rows();
        let mut total = 0;
        for &i in &idxs {
            let v = &self.nodes[i].value;
            if v.rows() != m {
                return Err(shape_err("concat_cols", &self.nodes[*first].value, v));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &i in &idxs {
                data.extend_from_slice(self.nodes[i].value.row_slice(r));
            }
        }
        let out = Tensor::matrix(m, total, data)?;
        let rg = idxs.iter().any(|&i| self.rg(i));
        Ok(self.push(out, rg, Op::ConcatCols(idxs)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let idxs = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>, _>>()?;
        let first = idxs.first().ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?;
        let n = self.nodes[*first].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &i in &idxs {
            let v = &self.nodes[i].value;
            if v.cols() != n {
                return Err(shape_err("concat_rows", &self.nodes[*first].value, v));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::matrix(rows, n, data)?;
        let rg = idxs.iter().any(|&i| self.rg(i));
        Ok(self.push(out, rg, Op::ConcatRows(idxs)))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let ix = self.idx(x)?;
        let xv = &self.nodes[ix].value;
        let (m, n) = xv.dims();
        if rows.is_empty() || rows.iter().any(|&r| r >= m) {
            return Err(TensorError::Invalid(format!("row selection {rows:?} out of {m} rows")));
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(xv.row_slice(r));
        }
        let out = Tensor::matrix(rows.len(), n, data)?;
        let rg = self.rg(ix);
        Ok(self.push(out, rg, Op::SelectRows { x: ix, rows: rows.to_vec() }))
    }

    /// Mean of the listed rows as a `1 x n` row.
    pub fn mean_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let ix = self.idx(x)?;
        let xv = &self.nodes[ix].value;
        let (m, n) = xv.dims();
        if rows.is_empty() || rows.iter().any(|&r| r >= m) {
            return Err(TensorError::Invalid(format!("row selection {rows:?} out of {m} rows")));
        }
        let mut acc = vec![0.0; n];
        for &r in rows {
            for (a, v) in acc.iter_mut().zip(xv.row_slice(r)) {
                *a += v;
            }
        }
        let k = rows.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        let out = finite("mean_rows", Tensor::row(acc))?;
        let rg = self.rg(ix);
        Ok(self.push(out, rg, Op::MeanRows { x: ix, rows: rows.to_vec() }))
    }

    /// Scales each row to unit L2 norm. A zero row is an error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let ix = self.idx(x)?;
        let xv = &self.nodes[ix].value;
        let (m, n) = xv.dims();
        let mut data = xv.data().to_vec();
        let mut norms = Vec::with_capacity(m);
        for r in 0..m {
            let row = &mut data[r * n..(r + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(TensorError::ZeroNorm(r));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let out = finite("normalize_rows", Tensor::matrix(m, n, data)?)?;
        let rg = self.rg(ix);
        Ok(self.push(out, rg, Op::NormalizeRows { x: ix, norms }))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let ia = self.idx(a)?;
        let out = finite("sum", Tensor::scalar(self.nodes[ia].value.sum()))?;
        let rg = self.rg(ia);
        Ok(self.push(out, rg, Op::Sum(ia)))
    }

    /// Mean negative log-likelihood of `targets` over positions whose target
    /// is not `ignore_id`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_id: Option<usize>,
    ) -> Result<Var, TensorError> {
        let il = self.idx(logits)?;
        let lv = &self.nodes[il].value;
        let (t, v) = lv.dims();
        if targets.len() != t {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; t * v];
        let mut kept = Vec::with_capacity(t);
        let mut total = 0.0;
        let mut count = 0;
        for (pos, &target) in targets.iter().enumerate() {
            if Some(target) == ignore_id {
                kept.push(None);
                continue;
            }
            if target >= v {
                return Err(TensorError::TargetOutOfRange { position: pos, id: target, vocab: v });
            }
            let row = lv.row_slice(pos);
            total += nll(row, target);
            let p = &mut probs[pos * v..(pos + 1) * v];
            p.copy_from_slice(row);
            softmax_in_place(p);
            kept.push(Some(target));
            count += 1;
        }
        if count == 0 {
            return Err(TensorError::NoSupervisedPositions);
        }
        let out = finite("cross_entropy", Tensor::scalar(total / count as f64))?;
        let rg = self.rg(il);
        let probs = Tensor::matrix(t, v, probs)?;
        Ok(self.push(out, rg, Op::CrossEntropy { logits: il, targets: kept, probs, count }))
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every leaf
    /// that requires them and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, TensorError> {
        let il = self.idx(loss)?;
        if self.nodes[il].value.numel() != 1 {
            return Err(TensorError::NotScalar(self.nodes[il].value.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if self.nodes[il].requires_grad {
            grads[il] = Some(Tensor::filled(self.nodes[il].value.shape(), 1.0));
        }
        for i in (0..=il).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let tape = self.id;
        for (i, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                grads[i] = None;
            } else if grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        self.nodes.clear();
        self.id = fresh_id();
        Ok(Gradients { tape, grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let mut send = |j: usize, contrib: Tensor| {
            if !self.nodes[j].requires_grad {
                return;
            }
            match &mut grads[j] {
                Some(acc) => {
                    for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                        *a += c;
                    }
                }
                slot @ None => {
                    let shape = self.nodes[j].value.shape().to_vec();
                    *slot = Some(Tensor::new(shape, contrib.into_data()).expect("grad shape"));
                }
            }
        };
        let val = |j: usize| &self.nodes[j].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    send(*a, matmul_plain(g, &val(*b).transpose()).expect("matmul grad"));
                }
                if self.rg(*b) {
                    send(*b, matmul_plain(&val(*a).transpose(), g).expect("matmul grad"));
                }
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::AddRow(x, row) => {
                send(*x, g.clone());
                send(*row, col_sums(g));
            }
            Op::RepeatRows(row) => send(*row, col_sums(g)),
            Op::Mul(a, b) => {
                send(*a, hadamard(g, val(*b)));
                send(*b, hadamard(g, val(*a)));
            }
            Op::MulConst(a, c) => send(*a, hadamard(g, c)),
            Op::AddConst(a) => send(*a, g.clone()),
            Op::Scale(a, s) => send(*a, g.map(|v| v * s)),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let (m, n) = y.dims();
                let mut out = vec![0.0; m * n];
                for r in 0..m {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for c in 0..n {
                        out[r * n + c] = yr[c] * (gr[c] - dot);
                    }
                }
                send(*a, Tensor::matrix(m, n, out).expect("softmax grad"));
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (m, n) = xhat.dims();
                let gv = val(*gain).data();
                if self.rg(*gain) {
                    send(*gain, col_sums(&hadamard(g, xhat)).reshape_like(val(*gain)));
                }
                if self.rg(*bias) {
                    send(*bias, col_sums(g).reshape_like(val(*bias)));
                }
                if self.rg(*x) {
                    let mut out = vec![0.0; m * n];
                    for r in 0..m {
                        let gr = g.row_slice(r);
                        let hr = xhat.row_slice(r);
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(p, q)| p * q).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dhh = dh.iter().zip(hr).map(|(p, q)| p * q).sum::<f64>() / n as f64;
                        for c in 0..n {
                            out[r * n + c] = rstd[r] * (dh[c] - mean_dh - hr[c] * mean_dhh);
                        }
                    }
                    send(*x, Tensor::matrix(m, n, out).expect("layer_norm grad"));
                }
            }
            Op::Gelu(a) => {
                let x = val(*a);
                let data = x.data().iter().zip(g.data()).map(|(&xv, &gv)| gv * gelu_grad(xv)).collect();
                send(*a, Tensor::new(x.shape().to_vec(), data).expect("gelu grad"));
            }
            Op::GatherRows { table, ids } => {
                let tv = val(*table);
                let d = tv.cols();
                let mut out = Tensor::zeros(tv.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut out.data_mut()[id * d..(id + 1) * d];
                    for (o, v) in dst.iter_mut().zip(g.row_slice(r)) {
                        *o += v;
                    }
                }
                send(*table, out);
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let (m, n) = xv.dims();
                let len = g.cols();
                let mut out = vec![0.0; m * n];
                for r in 0..m {
                    out[r * n + start..r * n + start + len].copy_from_slice(g.row_slice(r));
                }
                send(*x, Tensor::new(xv.shape().to_vec(), out).expect("slice grad"));
            }
            Op::ConcatCols(parts) => {
                let m = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let mut out = Vec::with_capacity(m * w);
                    for r in 0..m {
                        out.extend_from_slice(&g.row_slice(r)[offset..offset + w]);
                    }
                    offset += w;
                    send(p, Tensor::new(val(p).shape().to_vec(), out).expect("concat grad"));
                }
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let h = val(p).rows();
                    let out = g.data()[offset * n..(offset + h) * n].to_vec();
                    offset += h;
                    send(p, Tensor::new(val(p).shape().to_vec(), out).expect("concat grad"));
                }
            }
            Op::SelectRows { x, rows } => {
                let xv = val(*x);
                let n = xv.cols();
                let mut out = Tensor::zeros(xv.shape());
                for (k, &r) in rows.iter().enumerate() {
                    for (o, v) in out.data_mut()[r * n..(r + 1) * n].iter_mut().zip(g.row_slice(k)) {
                        *o += v;
                    }
                }
                send(*x, out);
            }
            Op::MeanRows { x, rows } => {
                let xv = val(*x);
                let n = xv.cols();
                let k = rows.len() as f64;
                let mut out = Tensor::zeros(xv.shape());
                for &r in rows {
                    for (o, v) in out.data_mut()[r * n..(r + 1) * n].iter_mut().zip(g.data()) {
                        *o += v / k;
                    }
                }
                send(*x, out);
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let (m, n) = y.dims();
                let mut out = vec![0.0; m * n];
                for r in 0..m {
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for c in 0..n {
                        out[r * n + c] = (gr[c] - yr[c] * dot) / norms[r];
                    }
                }
                send(*x, Tensor::new(val(*x).shape().to_vec(), out).expect("normalize grad"));
            }
            Op::Sum(a) => send(*a, Tensor::filled(val(*a).shape(), g.item())),
            Op::CrossEntropy { logits, targets, probs, count } => {
                let (t, v) = probs.dims();
                let scale = g.item() / *count as f64;
                let mut out = vec![0.0; t * v];
                for (pos, target) in targets.iter().enumerate() {
                    let Some(target) = target else { continue };
                    for c in 0..v {
                        out[pos * v + c] = probs.get(pos, c) * scale;
                    }
                    out[pos * v + target] -= scale;
                }
                send(*logits, Tensor::new(val(*logits).shape().to_vec(), out).expect("ce grad"));
            }
        }
    }
}

impl Tensor {
    fn reshape_like(self, like: &Tensor) -> Tensor {
        Tensor::new(like.shape().to_vec(), self.into_data()).expect("reshape_like")
    }
}

fn col_sums(g: &Tensor) -> Tensor {
    let (m, n) = g.dims();
    let mut out = vec![0.0; n];
    for r in 0..m {
        for (o, v) in out.iter_mut().zip(g.row_slice(r)) {
            *o += v;
        }
    }
    Tensor::row(out)
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(p, q)| p * q).collect();
    Tensor::new(a.shape().to_vec(), data).expect("hadamard shape")
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `-log softmax(row)[target]`, evaluated as `ln(1 + sum of the non-max
/// terms) + (max - row[target])` so tiny losses keep their precision.
fn nll(row: &[f64], target: usize) -> f64 {
    let (arg, max) =
        row.iter().enumerate().fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
    let rest: f64 = row.iter().enumerate().filter(|&(i, _)| i != arg).map(|(_, &v)| (v - max).exp()).sum();
    rest.ln_1p() + (max - row[target])
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
