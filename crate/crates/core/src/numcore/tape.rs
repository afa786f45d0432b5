//! Reverse-mode automatic differentiation over rank-2 tensors.
//!
//! A [`Tape`] records every primitive op in the order it is executed, so
//! node ids are already a topological order. [`Tape::backward`] walks the
//! nodes once in reverse and returns one gradient slot per node.

use std::sync::Arc;

use super::tensor::{dot, matmul_at_into, matmul_bt_into, matmul_into, norm, Tensor};
use crate::error::{shape_err, Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse row operator: row `i` holds `(column, weight)` pairs.
#[derive(Clone, Debug, Default)]
pub struct SparseRows {
    pub n_cols: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    LinearConst(Var, Arc<Tensor>),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Log1mExp(Var),
    Sqrt(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows(Var, Vec<f64>),
    Sum(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Sparse(Arc<SparseRows>, Var),
    Cosine(Var, Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        let (r, c) = self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::matrix(r, c, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(r, c),
        }
    }

    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

/// Records ops for one forward pass. Single-threaded; distinct tapes are independent.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    kink: f64,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), kink: f64::INFINITY }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest distance of any recorded ReLU/hinge input (or noted tie) to its kink.
    pub fn kink_distance(&self) -> f64 {
        self.kink
    }

    /// Record an externally detected non-smooth point (e.g. a label tie).
    pub fn note_kink(&mut self, distance: f64) {
        self.kink = self.kink.min(distance.abs());
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn mat(&self, v: Var) -> (usize, usize, &[f64]) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols(), t.data())
    }

    fn new_value(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::matrix(rows, cols, data).expect("op output shape")
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let value = if value.shape().len() == 1 {
            let n = value.len();
            value.reshape(1, n).expect("rank-1 to row")
        } else {
            value
        };
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Copy of `v`'s value with no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, ad) = self.mat(a);
        let (k2, n, bd) = self.mat(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(ad, bd, &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Self::new_value(m, n, out), Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, ad) = self.mat(a);
        let (n, k2, bd) = self.mat(b);
        if k != k2 {
            return Err(shape_err("matmul_bt", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_into(ad, bd, &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Self::new_value(m, n, out), Op::MatMulBt(a, b), rg))
    }

    /// `a · wᵀ` for a constant matrix shared by reference (frozen weights).
    pub fn linear_const(&mut self, a: Var, w: &Arc<Tensor>) -> Result<Var> {
        let (m, k, ad) = self.mat(a);
        let (n, k2) = (w.rows(), w.cols());
        if k != k2 {
            return Err(shape_err("linear_const", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_into(ad, w.data(), &mut out, m, k, n);
        let rg = self.rg(a);
        Ok(self.push(Self::new_value(m, n, out), Op::LinearConst(a, Arc::clone(w)), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.transpose();
        let rg = self.rg(a);
        self.push(t, Op::Transpose(a), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, mk: fn(Var, Var) -> Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (r, c, ad) = self.mat(a);
        let bd = self.nodes[b.0].value.data();
        let out = ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Self::new_value(r, c, out), mk(a, b), rg))
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

    /// `a[m,n] + b[1,n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n, ad) = self.mat(a);
        let (br, bc, bd) = self.mat(b);
        if br != 1 || bc != n {
            return Err(shape_err("add_row", format!("[{m},{n}] + [{br},{bc}]")));
        }
        let mut out = ad.to_vec();
        for row in out.chunks_mut(n) {
            for (o, &y) in row.iter_mut().zip(bd) {
                *o += y;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Self::new_value(m, n, out), Op::AddRow(a, b), rg))
    }

    /// `a * s` for a `[1,1]` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(shape_err("mul_scalar", format!("scalar operand has shape {:?}", self.shape(s))));
        }
        let sv = self.scalar(s);
        let (r, c, ad) = self.mat(a);
        let out = ad.iter().map(|&x| x * sv).collect();
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(Self::new_value(r, c, out), Op::MulScalar(a, s), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.nodes[a.0].value.map(|x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let t = self.nodes[a.0].value.map(|x| x + c);
        let rg = self.rg(a);
        self.push(t, Op::AddConst(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let rg = self.rg(a);
        if rg {
            let m = self.nodes[a.0].value.data().iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
            self.kink = self.kink.min(m);
        }
        let t = self.nodes[a.0].value.map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(t, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(f64::tanh);
        let rg = self.rg(a);
        self.push(t, Op::Tanh(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(f64::exp);
        let rg = self.rg(a);
        self.push(t, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(f64::ln);
        let rg = self.rg(a);
        self.push(t, Op::Log(a), rg)
    }

    /// `ln(1 - e^x)` for `x < 0`, evaluated stably.
    pub fn log1m_exp(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(log1m_exp);
        let rg = self.rg(a);
        self.push(t, Op::Log1mExp(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(f64::sqrt);
        let rg = self.rg(a);
        self.push(t, Op::Sqrt(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c, ad) = self.mat(a);
        let mut out = ad.to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        self.push(Self::new_value(r, c, out), Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (r, c, ad) = self.mat(a);
        let mut out = ad.to_vec();
        for row in out.chunks_mut(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let rg = self.rg(a);
        self.push(Self::new_value(r, c, out), Op::LogSoftmaxRows(a), rg)
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let (r, c, ad) = self.mat(a);
        let mut out = ad.to_vec();
        let mut inv = Vec::with_capacity(r);
        for row in out.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv.push(is);
        }
        let rg = self.rg(a);
        self.push(Self::new_value(r, c, out), Op::LayerNormRows(a, inv), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Sum of a list of nodes of identical shape.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let mut it = xs.iter();
        let first = *it.next().ok_or(Error::Empty("add_all"))?;
        let mut acc = first;
        for &x in it {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let c = self.shape(*xs.first().ok_or(Error::Empty("concat_rows"))?).1;
        let mut data = Vec::new();
        let mut r = 0;
        let mut rg = false;
        for &x in xs {
            let (xr, xc, xd) = self.mat(x);
            if xc != c {
                return Err(shape_err("concat_rows", format!("width {xc} vs {c}")));
            }
            data.extend_from_slice(xd);
            r += xr;
            rg |= self.rg(x);
        }
        Ok(self.push(Self::new_value(r, c, data), Op::ConcatRows(xs.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let r = self.shape(*xs.first().ok_or(Error::Empty("concat_cols"))?).0;
        let mut total = 0;
        let mut rg = false;
        for &x in xs {
            let (xr, xc) = self.shape(x);
            if xr != r {
                return Err(shape_err("concat_cols", format!("height {xr} vs {r}")));
            }
            total += xc;
            rg |= self.rg(x);
        }
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for &x in xs {
            let (_, xc, xd) = self.mat(x);
            for i in 0..r {
                data[i * total + off..i * total + off + xc].copy_from_slice(&xd[i * xc..(i + 1) * xc]);
            }
            off += xc;
        }
        Ok(self.push(Self::new_value(r, total, data), Op::ConcatCols(xs.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c, ad) = self.mat(a);
        if len == 0 || start + len > r {
            return Err(shape_err("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let data = ad[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Self::new_value(len, c, data), Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c, ad) = self.mat(a);
        if len == 0 || start + len > c {
            return Err(shape_err("slice_cols", format!("cols {start}..{} of {c}", start + len)));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&ad[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Self::new_value(r, len, data), Op::SliceCols(a, start), rg))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c, ad) = self.mat(a);
        if idx.is_empty() {
            return Err(Error::Empty("gather_rows"));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(shape_err("gather_rows", format!("row {i} of {r}")));
            }
            data.extend_from_slice(&ad[i * c..(i + 1) * c]);
        }
        let rg = self.rg(a);
        Ok(self.push(Self::new_value(idx.len(), c, data), Op::GatherRows(a, idx.to_vec()), rg))
    }

    /// `S · a` for a constant sparse operator `S`.
    pub fn sparse_matmul(&mut self, s: Arc<SparseRows>, a: Var) -> Result<Var> {
        let (r, c, ad) = self.mat(a);
        if s.n_cols != r {
            return Err(shape_err("sparse_matmul", format!("operator width {} vs {r} rows", s.n_cols)));
        }
        let mut out = vec![0.0; s.rows.len() * c];
        for (i, row) in s.rows.iter().enumerate() {
            let orow = &mut out[i * c..(i + 1) * c];
            for &(j, w) in row {
                for (o, &x) in orow.iter_mut().zip(&ad[j * c..(j + 1) * c]) {
                    *o += w * x;
                }
            }
        }
        let n = s.rows.len();
        let rg = self.rg(a);
        Ok(self.push(Self::new_value(n, c, out), Op::Sparse(s, a), rg))
    }

    /// Cosine similarity of two equal-length row vectors, as a `[1,1]` node.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine", a, b)?;
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let (na, nb) = (norm(ad), norm(bd));
        if na == 0.0 || nb == 0.0 {
            return Err(Error::DegenerateVector);
        }
        let c = dot(ad, bd) / (na * nb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(c), Op::Cosine(a, b), rg))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.nodes[a.0].value.reshape(rows, cols)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Gradients of scalar `loss` w.r.t. every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::NonScalarLoss(shape));
        }
        self.backward_seeded(loss, vec![1.0])
    }

    /// Backward pass from `root` with an explicit upstream gradient.
    pub fn backward_seeded(&self, root: Var, seed: Vec<f64>) -> Result<Gradients> {
        if seed.len() != self.nodes[root.0].value.len() {
            return Err(shape_err("backward", "seed size differs from root"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        let shapes = self.nodes.iter().map(|n| (n.value.rows(), n.value.cols())).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k, ad) = self.mat(*a);
                let (_, n, bd) = self.mat(*b);
                acc(*a, &mut |s| matmul_bt_into(g, bd, s, m, n, k));
                acc(*b, &mut |s| matmul_at_into(ad, g, s, m, k, n));
            }
            Op::MatMulBt(a, b) => {
                let (m, k, ad) = self.mat(*a);
                let (n, _, bd) = self.mat(*b);
                acc(*a, &mut |s| matmul_into(g, bd, s, m, n, k));
                acc(*b, &mut |s| matmul_at_into(g, ad, s, m, n, k));
            }
            Op::LinearConst(a, w) => {
                let (m, k, _) = self.mat(*a);
                let n = w.rows();
                acc(*a, &mut |s| matmul_into(g, w.data(), s, m, n, k));
            }
            Op::Transpose(a) => {
                let (r, c, _) = self.mat(*a);
                acc(*a, &mut |s| {
                    for p in 0..r {
                        for q in 0..c {
                            s[p * c + q] += g[q * r + p];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(x, &d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let ad = self.nodes[a.0].value.data();
                let bd = self.nodes[b.0].value.data();
                acc(*a, &mut |s| s.iter_mut().zip(g).zip(bd).for_each(|((x, &d), &w)| *x += d * w));
                acc(*b, &mut |s| s.iter_mut().zip(g).zip(ad).for_each(|((x, &d), &w)| *x += d * w));
            }
            Op::Div(a, b) => {
                let bd = self.nodes[b.0].value.data();
                acc(*a, &mut |s| s.iter_mut().zip(g).zip(bd).for_each(|((x, &d), &w)| *x += d / w));
                acc(*b, &mut |s| {
                    for (j, x) in s.iter_mut().enumerate() {
                        *x -= g[j] * y[j] / bd[j];
                    }
                });
            }
            Op::AddRow(a, b) => {
                let n = self.shape(*b).1;
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    for row in g.chunks(n) {
                        add_into(s, row);
                    }
                });
            }
            Op::MulScalar(a, sv) => {
                let ad = self.nodes[a.0].value.data();
                let k = self.scalar(*sv);
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, &d)| *x += d * k));
                acc(*sv, &mut |s| s[0] += dot(g, ad));
            }
            Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, &d)| *x += d * c)),
            Op::AddConst(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::Relu(a) => {
                let ad = self.nodes[a.0].value.data();
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        if ad[j] > 0.0 {
                            s[j] += g[j];
                        }
                    }
                });
            }
            Op::Tanh(a) => acc(*a, &mut |s| {
                for j in 0..s.len() {
                    s[j] += g[j] * (1.0 - y[j] * y[j]);
                }
            }),
            Op::Gelu(a) => {
                let ad = self.nodes[a.0].value.data();
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        let x = ad[j];
                        let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        s[j] += g[j] * (0.5 * (1.0 + t) + 0.5 * x * dt);
                    }
                });
            }
            Op::Exp(a) => acc(*a, &mut |s| {
                for j in 0..s.len() {
                    s[j] += g[j] * y[j];
                }
            }),
            Op::Log(a) => {
                let ad = self.nodes[a.0].value.data();
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += g[j] / ad[j];
                    }
                });
            }
            Op::Log1mExp(a) => {
                let ad = self.nodes[a.0].value.data();
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        s[j] -= g[j] / (-ad[j]).exp_m1();
                    }
                });
            }
            Op::Sqrt(a) => acc(*a, &mut |s| {
                for j in 0..s.len() {
                    s[j] += g[j] * 0.5 / y[j];
                }
            }),
            Op::SoftmaxRows(a) => {
                let c = self.shape(*a).1;
                acc(*a, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let inner = dot(grow, yrow);
                        for j in 0..c {
                            srow[j] += yrow[j] * (grow[j] - inner);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let c = self.shape(*a).1;
                acc(*a, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let total: f64 = grow.iter().sum();
                        for j in 0..c {
                            srow[j] += grow[j] - yrow[j].exp() * total;
                        }
                    }
                });
            }
            Op::LayerNormRows(a, inv) => {
                let c = self.shape(*a).1;
                acc(*a, &mut |s| {
                    for (r, ((srow, grow), yrow)) in s.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)).enumerate() {
                        let mg = grow.iter().sum::<f64>() / c as f64;
                        let mgy = dot(grow, yrow) / c as f64;
                        for j in 0..c {
                            srow[j] += inv[r] * (grow[j] - mg - yrow[j] * mgy);
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.nodes[x.0].value.len();
                    acc(x, &mut |s| add_into(s, &g[off..off + n]));
                    off += n;
                }
            }
            Op::ConcatCols(xs) => {
                let total = node.value.cols();
                let r = node.value.rows();
                let mut off = 0;
                for &x in xs {
                    let xc = self.shape(x).1;
                    acc(x, &mut |s| {
                        for i in 0..r {
                            add_into(&mut s[i * xc..(i + 1) * xc], &g[i * total + off..i * total + off + xc]);
                        }
                    });
                    off += xc;
                }
            }
            Op::SliceRows(a, start) => {
                let c = self.shape(*a).1;
                acc(*a, &mut |s| add_into(&mut s[start * c..start * c + g.len()], g));
            }
            Op::SliceCols(a, start) => {
                let c = self.shape(*a).1;
                let len = node.value.cols();
                acc(*a, &mut |s| {
                    for (i, grow) in g.chunks(len).enumerate() {
                        add_into(&mut s[i * c + start..i * c + start + len], grow);
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let c = self.shape(*a).1;
                acc(*a, &mut |s| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut s[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::Sparse(sp, a) => {
                let c = self.shape(*a).1;
                acc(*a, &mut |s| {
                    for (i, row) in sp.rows.iter().enumerate() {
                        let grow = &g[i * c..(i + 1) * c];
                        for &(j, w) in row {
                            for (x, &d) in s[j * c..(j + 1) * c].iter_mut().zip(grow) {
                                *x += w * d;
                            }
                        }
                    }
                });
            }
            Op::Cosine(a, b) => {
                let ad = self.nodes[a.0].value.data();
                let bd = self.nodes[b.0].value.data();
                let (na, nb) = (norm(ad), norm(bd));
                let c = y[0];
                let d = g[0];
                acc(*a, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += d * (bd[j] / (na * nb) - c * ad[j] / (na * na));
                    }
                });
                acc(*b, &mut |s| {
                    for j in 0..s.len() {
                        s[j] += d * (ad[j] / (na * nb) - c * bd[j] / (nb * nb));
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |s| add_into(s, g)),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn log1m_exp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// Numerically stable softmax with max subtraction.
pub fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    softmax_in_place(&mut v);
    v
}

/// Cosine similarity of plain slices.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err("cosine", format!("lengths {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector);
    }
    Ok(dot(a, b) / (na * nb))
}
