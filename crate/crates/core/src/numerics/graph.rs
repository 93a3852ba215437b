//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and the handles of
//! its parents. Node indices are a topological order, so `backward` walks the
//! tape once from the end and visits each node exactly once.

use crate::error::{AktError, Result};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tensor::{matmul_into, Tensor};
use crate::scalar::{lit, Scalar};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Probabilities are clamped into `[BCE_EPS, 1 - BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Param(#[allow(dead_code)] ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, S),
    MulConst(Var, Vec<S>),
    ScalarTimesConst(Var, Vec<S>),
    Exp(Var),
    Sigmoid(Var),
    Softplus(Var),
    Relu(Var),
    MaskedSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<S>, inv_std: Vec<S> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherMean { table: Var, lists: Vec<Vec<usize>> },
    Bce { pred: Var, labels: Vec<S>, mask: Vec<bool> },
    Sum(Var),
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    param_vars: Vec<Option<Var>>,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), param_vars: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Free input that does receive a gradient (read back with [`Graph::grad`]).
    pub fn variable(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node, so the
    /// gradient of a parameter used in many places accumulates in one slot.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if self.param_vars.len() < store.len() {
            self.param_vars.resize(store.len(), None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), true);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(AktError::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let value = self.zip_values(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let value = self.zip_values(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let value = self.zip_values(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `a (n×m) + row (1×m)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(AktError::shape("add_row", format!("{:?} + {:?}", av.shape(), rv.shape())));
        }
        let m = av.cols();
        let data = av.data().iter().enumerate().map(|(i, &x)| x + rv.data()[i % m]).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// `a (n×m) * col (n×1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.cols() != 1 || cv.rows() != av.rows() {
            return Err(AktError::shape("mul_col", format!("{:?} * {:?}", av.shape(), cv.shape())));
        }
        let m = av.cols();
        let data = av.data().iter().enumerate().map(|(i, &x)| x * cv.data()[i / m]).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(col);
        Ok(self.push(value, Op::MulCol(a, col), rg))
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// Elementwise product with a constant of the same size (dropout masks, row masks).
    pub fn mul_const(&mut self, a: Var, factors: Vec<S>) -> Result<Var> {
        let av = self.value(a);
        if factors.len() != av.len() {
            return Err(AktError::shape("mul_const", format!("{} factors for {:?}", factors.len(), av.shape())));
        }
        let data = av.data().iter().zip(&factors).map(|(&x, &f)| x * f).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::MulConst(a, factors), rg))
    }

    /// `s · C` for a 1×1 node `s` and a constant matrix `C`.
    pub fn scalar_times_const(&mut self, s: Var, c: Tensor<S>) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(AktError::shape("scalar_times_const", format!("{:?} is not a scalar", self.shape(s))));
        }
        let sv = self.value(s).data()[0];
        let value = c.map(|x| x * sv);
        let rg = self.rg(s);
        Ok(self.push(value, Op::ScalarTimesConst(s, c.into_data()), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(S::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let rg = self.rg(a);
        self.push(value, Op::Softplus(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(S::zero()));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    /// Row-wise softmax restricted to entries where `mask` is true. Masked
    /// entries come out exactly zero; a row with no allowed entry is all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let av = self.value(a);
        if mask.len() != av.len() {
            return Err(AktError::shape("masked_softmax", format!("mask {} for {:?}", mask.len(), av.shape())));
        }
        let value = masked_softmax_rows(av, mask);
        let rg = self.rg(a);
        Ok(self.push(value, Op::MaskedSoftmax(a), rg))
    }

    /// Normalize each row to zero mean and unit variance, then apply `gain` and `bias` (both 1×m).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let m = xv.cols();
        if gv.len() != m || bv.len() != m {
            return Err(AktError::shape("layer_norm", format!("x {:?}, gain {:?}, bias {:?}", xv.shape(), gv.shape(), bv.shape())));
        }
        let n = xv.rows();
        let eps: S = lit(LAYER_NORM_EPS);
        let mut xhat = vec![S::zero(); n * m];
        let mut inv_std = vec![S::zero(); n];
        let mut out = vec![S::zero(); n * m];
        let mf = S::from_usize_lossy(m);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<S>() / mf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / mf;
            let is = S::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..m {
                let h = (row[j] - mean) * is;
                xhat[i * m + j] = h;
                out[i * m + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, m) = (xv.rows(), xv.cols());
        if start + len > m || len == 0 {
            return Err(AktError::shape("slice_cols", format!("[{start}, {}) of {m} columns", start + len)));
        }
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let value = Tensor::new(vec![n, len], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts.first().map(|&p| self.value(p).rows()).ok_or_else(|| AktError::shape("concat_cols", "no inputs"))?;
        if parts.iter().any(|&p| self.value(p).rows() != n) {
            return Err(AktError::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![n, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Output row `i` is the mean of the table rows listed in `lists[i]`.
    /// A single-element list is a plain lookup.
    pub fn gather_mean(&mut self, table: Var, lists: Vec<Vec<usize>>) -> Result<Var> {
        let tv = self.value(table);
        let (rows, m) = (tv.rows(), tv.cols());
        let mut data = vec![S::zero(); lists.len() * m];
        for (i, list) in lists.iter().enumerate() {
            if list.is_empty() {
                return Err(AktError::shape("gather_mean", format!("empty index list at row {i}")));
            }
            let w = S::one() / S::from_usize_lossy(list.len());
            for &r in list {
                if r >= rows {
                    return Err(AktError::Index { what: "embedding table", index: r, size: rows });
                }
                for (o, &v) in data[i * m..(i + 1) * m].iter_mut().zip(tv.row(r)) {
                    *o += v * w;
                }
            }
        }
        let value = Tensor::new(vec![lists.len(), m], data)?;
        let rg = self.rg(table);
        Ok(self.push(value, Op::GatherMean { table, lists }, rg))
    }

    /// Summed binary cross-entropy over positions where `mask` is true.
    pub fn bce(&mut self, pred: Var, labels: Vec<S>, mask: Vec<bool>) -> Result<Var> {
        let pv = self.value(pred);
        if labels.len() != pv.len() || mask.len() != pv.len() {
            return Err(AktError::shape("bce", format!("{} labels, {} mask for {:?}", labels.len(), mask.len(), pv.shape())));
        }
        if !mask.iter().any(|&m| m) {
            return Err(AktError::Numerical("binary cross-entropy over an empty mask".into()));
        }
        let loss = bce_sum(pv.data(), &labels, &mask);
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { pred, labels, mask }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// Gradient of `root` (must be 1×1) with respect to every node requiring one.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(AktError::shape("backward", format!("root {:?} is not a scalar", self.shape(root))));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), S::one()));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients per parameter id after [`Graph::backward`]. Parameters that
    /// did not take part in the computation get `None`.
    pub fn param_grads(&self, n_params: usize) -> Vec<Option<Tensor<S>>> {
        (0..n_params)
            .map(|i| self.param_vars.get(i).copied().flatten().and_then(|v| self.grad(v).cloned()))
            .collect()
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if self.rg(*a) {
                    // dA = G · Bᵀ
                    let bt = bv.transpose();
                    let mut da = vec![S::zero(); n * k];
                    matmul_into(gd, bt.data(), &mut da, n, m, k);
                    accumulate(grads, *a, av.shape(), da);
                }
                if self.rg(*b) {
                    // dB = Aᵀ · G
                    let at = av.transpose();
                    let mut db = vec![S::zero(); k * m];
                    matmul_into(at.data(), gd, &mut db, k, n, m);
                    accumulate(grads, *b, bv.shape(), db);
                }
            }
            Op::Transpose(a) => {
                let gt = g.transpose();
                accumulate(grads, *a, self.shape(*a), gt.into_data());
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, self.shape(*a), gd.to_vec());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, self.shape(*b), gd.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, self.shape(*a), gd.to_vec());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, self.shape(*b), gd.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    accumulate(grads, *a, av.shape(), gd.iter().zip(bv.data()).map(|(&x, &y)| x * y).collect());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, bv.shape(), gd.iter().zip(av.data()).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::AddRow(a, row) => {
                if self.rg(*a) {
                    accumulate(grads, *a, self.shape(*a), gd.to_vec());
                }
                if self.rg(*row) {
                    let m = g.cols();
                    let mut dr = vec![S::zero(); m];
                    for (i, &x) in gd.iter().enumerate() {
                        dr[i % m] += x;
                    }
                    accumulate(grads, *row, self.shape(*row), dr);
                }
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a), self.value(*col));
                let m = av.cols();
                if self.rg(*a) {
                    let da = gd.iter().enumerate().map(|(i, &x)| x * cv.data()[i / m]).collect();
                    accumulate(grads, *a, av.shape(), da);
                }
                if self.rg(*col) {
                    let mut dc = vec![S::zero(); cv.len()];
                    for (i, (&x, &y)) in gd.iter().zip(av.data()).enumerate() {
                        dc[i / m] += x * y;
                    }
                    accumulate(grads, *col, cv.shape(), dc);
                }
            }
            Op::Scale(a, f) => {
                accumulate(grads, *a, self.shape(*a), gd.iter().map(|&x| x * *f).collect());
            }
            Op::MulConst(a, factors) => {
                accumulate(grads, *a, self.shape(*a), gd.iter().zip(factors).map(|(&x, &f)| x * f).collect());
            }
            Op::ScalarTimesConst(s, c) => {
                let ds = gd.iter().zip(c).map(|(&x, &y)| x * y).sum::<S>();
                accumulate(grads, *s, self.shape(*s), vec![ds]);
            }
            Op::Exp(a) => {
                let out = node.value.data();
                accumulate(grads, *a, self.shape(*a), gd.iter().zip(out).map(|(&x, &y)| x * y).collect());
            }
            Op::Sigmoid(a) => {
                let out = node.value.data();
                let da = gd.iter().zip(out).map(|(&x, &y)| x * y * (S::one() - y)).collect();
                accumulate(grads, *a, self.shape(*a), da);
            }
            Op::Softplus(a) => {
                let inp = self.value(*a).data();
                accumulate(grads, *a, self.shape(*a), gd.iter().zip(inp).map(|(&x, &z)| x * sigmoid(z)).collect());
            }
            Op::Relu(a) => {
                let inp = self.value(*a).data();
                let da = gd.iter().zip(inp).map(|(&x, &z)| if z > S::zero() { x } else { S::zero() }).collect();
                accumulate(grads, *a, self.shape(*a), da);
            }
            Op::MaskedSoftmax(a) => {
                let y = &node.value;
                let m = y.cols();
                let mut da = vec![S::zero(); y.len()];
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = &gd[i * m..(i + 1) * m];
                    let dot: S = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..m {
                        da[i * m + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *a, self.shape(*a), da);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gv = self.value(*gain).data();
                let m = g.cols();
                let n = g.rows();
                if self.rg(*gain) {
                    let mut dg = vec![S::zero(); m];
                    for (i, &x) in gd.iter().enumerate() {
                        dg[i % m] += x * xhat[i];
                    }
                    accumulate(grads, *gain, self.shape(*gain), dg);
                }
                if self.rg(*bias) {
                    let mut db = vec![S::zero(); m];
                    for (i, &x) in gd.iter().enumerate() {
                        db[i % m] += x;
                    }
                    accumulate(grads, *bias, self.shape(*bias), db);
                }
                if self.rg(*x) {
                    let mf = S::from_usize_lossy(m);
                    let mut dx = vec![S::zero(); n * m];
                    for i in 0..n {
                        let mut mean_dh = S::zero();
                        let mut mean_dh_h = S::zero();
                        for j in 0..m {
                            let dh = gd[i * m + j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[i * m + j];
                        }
                        mean_dh /= mf;
                        mean_dh_h /= mf;
                        for j in 0..m {
                            let dh = gd[i * m + j] * gv[j];
                            dx[i * m + j] = inv_std[i] * (dh - mean_dh - xhat[i * m + j] * mean_dh_h);
                        }
                    }
                    accumulate(grads, *x, self.shape(*x), dx);
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (n, m) = (xv.rows(), xv.cols());
                let len = g.cols();
                let mut dx = vec![S::zero(); n * m];
                for i in 0..n {
                    dx[i * m + start..i * m + start + len].copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.cols();
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(pv.len());
                        for i in 0..pv.rows() {
                            dp.extend_from_slice(&gd[i * total + offset..i * total + offset + w]);
                        }
                        accumulate(grads, p, pv.shape(), dp);
                    }
                    offset += w;
                }
            }
            Op::GatherMean { table, lists } => {
                let tv = self.value(*table);
                let m = tv.cols();
                let mut dt = vec![S::zero(); tv.len()];
                for (i, list) in lists.iter().enumerate() {
                    let w = S::one() / S::from_usize_lossy(list.len());
                    for &r in list {
                        for (o, &x) in dt[r * m..(r + 1) * m].iter_mut().zip(&gd[i * m..(i + 1) * m]) {
                            *o += x * w;
                        }
                    }
                }
                accumulate(grads, *table, tv.shape(), dt);
            }
            Op::Bce { pred, labels, mask } => {
                let pv = self.value(*pred).data();
                let up = gd[0];
                let eps: S = lit(BCE_EPS);
                let hi = S::one() - eps;
                let dp = pv
                    .iter()
                    .zip(labels)
                    .zip(mask)
                    .map(|((&p, &r), &keep)| {
                        if !keep || p < eps || p > hi {
                            S::zero()
                        } else {
                            up * (-r / p + (S::one() - r) / (S::one() - p))
                        }
                    })
                    .collect();
                accumulate(grads, *pred, self.shape(*pred), dp);
            }
            Op::Sum(a) => {
                let up = gd[0];
                let n = self.value(*a).len();
                accumulate(grads, *a, self.shape(*a), vec![up; n]);
            }
        }
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, shape: &[usize], delta: Vec<S>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), delta).expect("gradient shape matches value"));
        }
    }
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub fn softplus<S: Scalar>(x: S) -> S {
    // log(1 + e^x) = max(x, 0) + log(1 + e^-|x|)
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for positive inputs.
pub fn softplus_inverse<S: Scalar>(y: S) -> S {
    y + (-(-y).exp_m1()).ln()
}

/// Row-wise masked softmax on plain values (no tape).
pub fn masked_softmax_rows<S: Scalar>(x: &Tensor<S>, mask: &[bool]) -> Tensor<S> {
    let m = x.cols();
    let mut out = vec![S::zero(); x.len()];
    for i in 0..x.rows() {
        let row = x.row(i);
        let keep = &mask[i * m..(i + 1) * m];
        let max = row
            .iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|(&v, _)| v)
            .fold(S::neg_infinity(), S::max);
        if max == S::neg_infinity() {
            continue;
        }
        let mut total = S::zero();
        for j in 0..m {
            if keep[j] {
                let e = (row[j] - max).exp();
                out[i * m + j] = e;
                total += e;
            }
        }
        for o in &mut out[i * m..(i + 1) * m] {
            *o /= total;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
}

pub(crate) fn bce_sum<S: Scalar>(pred: &[S], labels: &[S], mask: &[bool]) -> S {
    let eps: S = lit(BCE_EPS);
    pred.iter()
        .zip(labels)
        .zip(mask)
        .filter(|(_, &keep)| keep)
        .map(|((&p, &r), _)| {
            let p = p.max(eps).min(S::one() - eps);
            -(r * p.ln() + (S::one() - r) * (S::one() - p).ln())
        })
        .sum()
}
