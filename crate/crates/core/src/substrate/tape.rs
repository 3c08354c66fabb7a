//! Reverse-mode differentiation over a fixed set of matrix operations.
//!
//! A [`Tape`] records every intermediate value; [`Tape::backward`] walks the
//! records in reverse and accumulates adjoints. Sparse operands are always
//! constants. Nodes that do not depend on any parameter are never
//! differentiated.

use std::sync::Arc;

use super::dense::{dot, Dense};
use super::param::{ParamId, ParamStore};
use super::scalar::{sigmoid, softplus, Scalar};
use super::sparse::Csr;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Spmm { a: Arc<Csr<T>>, x: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRowBias(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Gather(Var, Vec<usize>),
    ConcatCols(Var, Var),
    StackRows(Vec<Var>),
    RowL2Normalize(Var),
    RowDot(Var, Var),
    SoftmaxXentDiag(Var),
    Sum(Var),
    Mean(Var),
    WeightedMean(Var, Vec<T>),
}

struct Node<T> {
    value: Dense<T>,
    op: Op<T>,
    needs_grad: bool,
}

const NORM_EPS: f64 = 1e-12;

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Dense<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Dense<T> {
        &self.nodes[v.0].value
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.as_slice()[0]
    }

    pub fn constant(&mut self, value: Dense<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar_constant(&mut self, x: T) -> Var {
        self.constant(Dense::filled(1, 1, x))
    }

    /// Leaf holding a copy of the parameter's current value.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    /// Same value, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_with(a, b, false, false)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_with(a, b, false, true)
    }

    pub fn matmul_with(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let value = self.value(a).matmul_with(self.value(b), ta, tb)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, ng))
    }

    pub fn spmm(&mut self, a: Arc<Csr<T>>, x: Var) -> Result<Var> {
        let value = a.spmm(self.value(x))?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Spmm { a, x }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// `a + 1·biasᵀ` for a `1×cols` bias.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Error::dim(
                "add_row_bias",
                format!("{:?} + bias {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut value = av.clone();
        let b = bv.as_slice().to_vec();
        for r in 0..value.rows() {
            for (x, &y) in value.row_mut(r).iter_mut().zip(&b) {
                *x += y;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(value, Op::AddRowBias(a, bias), ng))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.tanh());
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.exp());
        let ng = self.ng(a);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.ln());
        let ng = self.ng(a);
        self.push(value, Op::Log(a), ng)
    }

    /// `log(1 + e^x)`; `softplus(-x) = -log σ(x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let ng = self.ng(a);
        self.push(value, Op::Softplus(a), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(a).gather_rows(idx)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Gather(a, idx.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = Dense::hstack(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::ConcatCols(a, b), ng))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Dense<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Dense::vstack(&refs)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, Op::StackRows(parts.to_vec()), ng))
    }

    pub fn row_l2_normalize(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let eps = T::of(NORM_EPS);
        let mut value = av.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let n = dot(row, row).sqrt().max(eps);
            row.iter_mut().for_each(|x| *x /= n);
        }
        let ng = self.ng(a);
        self.push(value, Op::RowL2Normalize(a), ng)
    }

    /// Row-wise inner products as an `n×1` column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).row_dot(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::RowDot(a, b), ng))
    }

    /// Mean over rows of `-log softmax(logits_i)[i]` for a square logit matrix.
    pub fn softmax_xent_diag(&mut self, logits: Var) -> Result<Var> {
        let l = self.value(logits);
        if l.rows() != l.cols() || l.rows() == 0 {
            return Err(Error::dim(
                "softmax_xent_diag",
                format!("needs a nonempty square matrix, got {:?}", l.shape()),
            ));
        }
        let n = l.rows();
        let mut total = T::zero();
        for i in 0..n {
            total += log_sum_exp(l.row(i)) - l.get(i, i);
        }
        let value = Dense::filled(1, 1, total / T::of(n as f64));
        let ng = self.ng(logits);
        Ok(self.push(value, Op::SoftmaxXentDiag(logits), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Dense::filled(1, 1, self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Dense::filled(1, 1, self.value(a).mean());
        let ng = self.ng(a);
        self.push(value, Op::Mean(a), ng)
    }

    /// `(1/n) Σ_k w_k a_k` over all `n` entries of `a`.
    pub fn weighted_mean(&mut self, a: Var, weights: Vec<T>) -> Result<Var> {
        let av = self.value(a);
        if weights.len() != av.as_slice().len() {
            return Err(Error::dim(
                "weighted_mean",
                format!("{} weights for {} entries", weights.len(), av.as_slice().len()),
            ));
        }
        let n = T::of(weights.len().max(1) as f64);
        let s: T = av
            .as_slice()
            .iter()
            .zip(&weights)
            .map(|(&x, &w)| x * w)
            .sum();
        let value = Dense::filled(1, 1, s / n);
        let ng = self.ng(a);
        Ok(self.push(value, Op::WeightedMean(a, weights), ng))
    }

    /// Mean squared error over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Adjoints of every node with respect to the `1×1` node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::dim(
                "backward",
                format!("loss must be 1x1, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Dense<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Dense::filled(1, 1, T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let acc = |v: Var, d: Dense<T>, grads: &mut Vec<Option<Dense<T>>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing
                        .add_assign(&d)
                        .expect("adjoint shape matches value"),
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Constant | Op::Param(_) => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        let da = if !*ta {
                            g.matmul_with(bv, false, !*tb)?
                        } else {
                            bv.matmul_with(&g, *tb, true)?
                        };
                        acc(*a, da, &mut grads);
                    }
                    if self.ng(*b) {
                        let db = if !*tb {
                            av.matmul_with(&g, !*ta, false)?
                        } else {
                            g.matmul_with(av, true, *ta)?
                        };
                        acc(*b, db, &mut grads);
                    }
                }
                Op::Spmm { a, x } => {
                    acc(*x, a.spmm_transposed(&g)?, &mut grads);
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        acc(*a, g.clone(), &mut grads);
                    }
                    acc(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    if self.ng(*b) {
                        acc(*b, g.scale(-T::one()), &mut grads);
                    }
                    acc(*a, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        acc(*a, g.hadamard(self.value(*b))?, &mut grads);
                    }
                    if self.ng(*b) {
                        acc(*b, g.hadamard(self.value(*a))?, &mut grads);
                    }
                }
                Op::Scale(a, s) => acc(*a, g.scale(*s), &mut grads),
                Op::AddRowBias(a, bias) => {
                    if self.ng(*bias) {
                        let mut db = Dense::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (d, &x) in db.as_mut_slice().iter_mut().zip(g.row(r)) {
                                *d += x;
                            }
                        }
                        acc(*bias, db, &mut grads);
                    }
                    acc(*a, g, &mut grads);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let d = g.zip_map(y, "sigmoid'", |g, y| g * y * (T::one() - y))?;
                    acc(*a, d, &mut grads);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let d = g.zip_map(y, "tanh'", |g, y| g * (T::one() - y * y))?;
                    acc(*a, d, &mut grads);
                }
                Op::Exp(a) => {
                    let d = g.hadamard(&node.value)?;
                    acc(*a, d, &mut grads);
                }
                Op::Log(a) => {
                    let d = g.zip_map(self.value(*a), "log'", |g, x| g / x)?;
                    acc(*a, d, &mut grads);
                }
                Op::Softplus(a) => {
                    let d = g.zip_map(self.value(*a), "softplus'", |g, x| g * sigmoid(x))?;
                    acc(*a, d, &mut grads);
                }
                Op::Gather(a, idx) => {
                    let src = self.value(*a);
                    let mut d = Dense::zeros(src.rows(), src.cols());
                    for (k, &r) in idx.iter().enumerate() {
                        for (o, &x) in d.row_mut(r).iter_mut().zip(g.row(k)) {
                            *o += x;
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    let rows = g.rows();
                    if self.ng(*a) {
                        let da = Dense::from_fn(rows, ca, |r, c| g.get(r, c));
                        acc(*a, da, &mut grads);
                    }
                    if self.ng(*b) {
                        let db = Dense::from_fn(rows, cb, |r, c| g.get(r, ca + c));
                        acc(*b, db, &mut grads);
                    }
                }
                Op::StackRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).rows();
                        if self.ng(p) {
                            acc(p, g.slice_rows(start, start + n), &mut grads);
                        }
                        start += n;
                    }
                }
                Op::RowL2Normalize(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let eps = T::of(NORM_EPS);
                    let mut d = Dense::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let norm = dot(x.row(r), x.row(r)).sqrt();
                        let gr = g.row(r);
                        let out = d.row_mut(r);
                        if norm < eps {
                            for (o, &gv) in out.iter_mut().zip(gr) {
                                *o = gv / eps;
                            }
                        } else {
                            let yg = dot(y.row(r), gr);
                            for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(y.row(r)) {
                                *o = (gv - yv * yg) / norm;
                            }
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::RowDot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let col = g.as_slice();
                    if self.ng(*a) {
                        let da = Dense::from_fn(av.rows(), av.cols(), |r, c| col[r] * bv.get(r, c));
                        acc(*a, da, &mut grads);
                    }
                    if self.ng(*b) {
                        let db = Dense::from_fn(bv.rows(), bv.cols(), |r, c| col[r] * av.get(r, c));
                        acc(*b, db, &mut grads);
                    }
                }
                Op::SoftmaxXentDiag(l) => {
                    let lv = self.value(*l);
                    let n = lv.rows();
                    let scale = g.get(0, 0) / T::of(n as f64);
                    let mut d = Dense::zeros(n, n);
                    for i in 0..n {
                        let row = lv.row(i);
                        let lse = log_sum_exp(row);
                        for (j, o) in d.row_mut(i).iter_mut().enumerate() {
                            let p = (row[j] - lse).exp();
                            let t = if i == j { T::one() } else { T::zero() };
                            *o = (p - t) * scale;
                        }
                    }
                    acc(*l, d, &mut grads);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    acc(*a, Dense::filled(r, c, g.get(0, 0)), &mut grads);
                }
                Op::Mean(a) => {
                    let (r, c) = self.value(*a).shape();
                    let n = T::of((r * c).max(1) as f64);
                    acc(*a, Dense::filled(r, c, g.get(0, 0) / n), &mut grads);
                }
                Op::WeightedMean(a, w) => {
                    let (r, c) = self.value(*a).shape();
                    let s = g.get(0, 0) / T::of(w.len().max(1) as f64);
                    let d = Dense::from_vec(r, c, w.iter().map(|&wk| wk * s).collect())?;
                    acc(*a, d, &mut grads);
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Run backward from `loss` and add parameter adjoints into the store's
    /// gradient buffers.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                store.get_mut(*id).grad.add_assign(g)?;
            }
        }
        Ok(())
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Dense<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Adjoint of a leaf; `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Dense<T>> {
        self.grads[v.0].as_ref()
    }
}

fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}
