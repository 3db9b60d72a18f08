//! Reverse-mode tape.
//!
//! Every op appends a node holding its output value. `backward` walks the
//! nodes in reverse append order, so a node's gradient is complete before
//! it is propagated to its inputs.

use std::f64::consts::PI;

use super::tensor::{gemm, matmul, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which (row, column) pairs may attend; forbidden pairs get `-inf` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn full(rows: usize, cols: usize) -> Self {
        AttentionMask {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    pub fn forbid(&mut self, r: usize, c: usize) {
        self.allowed[r * self.cols + c] = false;
    }

    pub fn allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Tensor,
        scale: f64,
    },
    Concat(Vec<Var>),
    SliceRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ReduceMean(Var),
    SquareError(Var, Var),
    GaussianNll {
        y: Var,
        mu: Var,
        log_sigma: Var,
    },
    MulConst(Var, Tensor),
    Scale(Var, f64),
    Clamp(Var, f64, f64),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of leaves that require them, indexed by `Var`.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(mismatch("matmul", ta, tb));
        }
        let out = matmul(ta, false, tb, false);
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let tb = self.value(b);
        let mut out = self.value(a).clone();
        for (x, y) in out.data_mut().iter_mut().zip(tb.data()) {
            *x -= y;
        }
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let tb = self.value(b);
        let mut out = self.value(a).clone();
        for (x, y) in out.data_mut().iter_mut().zip(tb.data()) {
            *x *= y;
        }
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `1 x cols` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tb.rows() != 1 || tb.cols() != tx.cols() {
            return Err(mismatch("add_bias", tx, tb));
        }
        let mut out = tx.clone();
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        self.push("add_bias", out, Op::AddBias(x, b), &[x, b])
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push("relu", out, Op::Relu(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push("softmax_rows", out, Op::Softmax(x), &[x])
    }

    /// Single-head `softmax(q kᵀ / sqrt(d) + mask) v`.
    pub fn scaled_dot_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.cols() != tk.cols() {
            return Err(mismatch("attention(q,k)", tq, tk));
        }
        if tk.rows() != tv.rows() {
            return Err(mismatch("attention(k,v)", tk, tv));
        }
        if let Some(m) = mask {
            if m.shape() != [tq.rows(), tk.rows()] {
                return Err(Error::ShapeMismatch {
                    op: "attention(mask)",
                    left: m.shape().to_vec(),
                    right: vec![tq.rows(), tk.rows()],
                });
            }
        }
        let scale = 1.0 / (tq.cols() as f64).sqrt();
        let mut probs = matmul(tq, false, tk, true);
        for r in 0..probs.rows() {
            let row = probs.row_mut(r);
            for (c, s) in row.iter_mut().enumerate() {
                *s *= scale;
                if mask.is_some_and(|m| !m.allowed(r, c)) {
                    *s = f64::NEG_INFINITY;
                }
            }
            softmax_in_place(row);
        }
        if !probs.is_finite() {
            return Err(Error::NonFinite("attention (row with every key masked)".into()));
        }
        let out = matmul(&probs, false, tv, false);
        self.push(
            "scaled_dot_attention",
            out,
            Op::Attention {
                q,
                k,
                v,
                probs,
                scale,
            },
            &[q, k, v],
        )
    }

    /// Post-softmax weights stored by an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&Tensor> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn concat_last_dim(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Config("concat of nothing".into()))?;
        let rows = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(mismatch("concat_last_dim", self.value(first), self.value(p)));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        self.push("concat_last_dim", out, Op::Concat(parts.to_vec()), parts)
    }

    /// Gathers the listed rows, in the given order.
    pub fn slice_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= tx.rows()) {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                left: tx.shape().to_vec(),
                right: vec![bad],
            });
        }
        let mut out = Tensor::zeros(indices.len(), tx.cols());
        for (o, &i) in indices.iter().enumerate() {
            out.row_mut(o).copy_from_slice(tx.row(i));
        }
        self.push("slice_rows", out, Op::SliceRows(x, indices.to_vec()), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if start + len > tx.cols() {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                left: tx.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let mut out = Tensor::zeros(tx.rows(), len);
        for r in 0..tx.rows() {
            out.row_mut(r).copy_from_slice(&tx.row(r)[start..start + len]);
        }
        self.push("slice_cols", out, Op::SliceCols(x, start), &[x])
    }

    pub fn reduce_mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "reduce_mean",
                left: tx.shape().to_vec(),
                right: vec![],
            });
        }
        let m = tx.data().iter().sum::<f64>() / tx.len() as f64;
        self.push("reduce_mean", Tensor::scalar(m), Op::ReduceMean(x), &[x])
    }

    /// `(1/rows) · Σ_rows ‖h − y‖²`.
    pub fn square_error(&mut self, h: Var, y: Var) -> Result<Var> {
        self.same_shape("square_error", h, y)?;
        let (th, ty) = (self.value(h), self.value(y));
        let s: f64 = th.data().iter().zip(ty.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let n = th.rows().max(1) as f64;
        self.push("square_error", Tensor::scalar(s / n), Op::SquareError(h, y), &[h, y])
    }

    /// Mean over rows of the diagonal-Gaussian negative log-likelihood,
    /// summed over columns. Scale is `exp(log_sigma)`.
    pub fn gaussian_nll(&mut self, y: Var, mu: Var, log_sigma: Var) -> Result<Var> {
        self.same_shape("gaussian_nll", y, mu)?;
        self.same_shape("gaussian_nll", y, log_sigma)?;
        let (ty, tm, ts) = (self.value(y), self.value(mu), self.value(log_sigma));
        let half_ln_2pi = 0.5 * (2.0 * PI).ln();
        let mut s = 0.0;
        for ((&yv, &m), &ls) in ty.data().iter().zip(tm.data()).zip(ts.data()) {
            let z = (yv - m) * (-ls).exp();
            s += half_ln_2pi + ls + 0.5 * z * z;
        }
        let n = ty.rows().max(1) as f64;
        self.push(
            "gaussian_nll",
            Tensor::scalar(s / n),
            Op::GaussianNll { y, mu, log_sigma },
            &[y, mu, log_sigma],
        )
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != c.shape() {
            return Err(mismatch("mul_const", tx, c));
        }
        let mut out = tx.clone();
        for (o, m) in out.data_mut().iter_mut().zip(c.data()) {
            *o *= m;
        }
        self.push("mul_const", out, Op::MulConst(x, c.clone()), &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push("scale", out, Op::Scale(x, s), &[x])
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push("clamp", out, Op::Clamp(x, lo, hi), &[x])
    }

    /// Propagates from a `1 x 1` loss. The tape can only be walked once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.value(loss).shape();
        if shape != [1, 1] {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, g, &mut grads);
        }
        for (i, slot) in grads.iter_mut().enumerate() {
            if !(matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].requires_grad) {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: Tensor, grads: &mut [Option<Tensor>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, matmul(&g, false, val(*b), true));
                }
                if rg(*b) {
                    accumulate(grads, *b, matmul(val(*a), true, &g, false));
                }
            }
            Op::Add(a, b) => {
                if rg(*b) {
                    accumulate(grads, *b, g.clone());
                }
                if rg(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Sub(a, b) => {
                if rg(*b) {
                    accumulate(grads, *b, g.map(|x| -x));
                }
                if rg(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let mut ga = g.clone();
                    for (x, y) in ga.data_mut().iter_mut().zip(val(*b).data()) {
                        *x *= y;
                    }
                    accumulate(grads, *a, ga);
                }
                if rg(*b) {
                    let mut gb = g;
                    for (x, y) in gb.data_mut().iter_mut().zip(val(*a).data()) {
                        *x *= y;
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::AddBias(x, b) => {
                if rg(*b) {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *b, gb);
                }
                if rg(*x) {
                    accumulate(grads, *x, g);
                }
            }
            Op::Relu(x) => {
                let mut gx = g;
                for (o, &v) in gx.data_mut().iter_mut().zip(val(*x).data()) {
                    if v <= 0.0 {
                        *o = 0.0;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let p = &self.nodes[i].value;
                accumulate(grads, *x, softmax_backward(p, &g));
            }
            Op::Attention {
                q,
                k,
                v,
                probs,
                scale,
            } => {
                if rg(*v) {
                    accumulate(grads, *v, matmul(probs, true, &g, false));
                }
                if rg(*q) || rg(*k) {
                    let dp = matmul(&g, false, val(*v), true);
                    let mut ds = softmax_backward(probs, &dp);
                    ds.scale_assign(*scale);
                    if rg(*q) {
                        accumulate(grads, *q, matmul(&ds, false, val(*k), false));
                    }
                    if rg(*k) {
                        accumulate(grads, *k, matmul(&ds, true, val(*q), false));
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = val(p).cols();
                    if rg(p) {
                        let mut gp = Tensor::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        accumulate(grads, p, gp);
                    }
                    off += cols;
                }
            }
            Op::SliceRows(x, idx) => {
                let tx = val(*x);
                let mut gx = Tensor::zeros(tx.rows(), tx.cols());
                for (o, &r) in idx.iter().enumerate() {
                    for (d, s) in gx.row_mut(r).iter_mut().zip(g.row(o)) {
                        *d += s;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::SliceCols(x, start) => {
                let tx = val(*x);
                let mut gx = Tensor::zeros(tx.rows(), tx.cols());
                for r in 0..g.rows() {
                    gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, gx);
            }
            Op::ReduceMean(x) => {
                let tx = val(*x);
                let s = g.item() / tx.len() as f64;
                accumulate(grads, *x, Tensor::full(tx.rows(), tx.cols(), s));
            }
            Op::SquareError(h, y) => {
                let (th, ty) = (val(*h), val(*y));
                let c = 2.0 * g.item() / th.rows().max(1) as f64;
                let mut gh = th.clone();
                for (o, t) in gh.data_mut().iter_mut().zip(ty.data()) {
                    *o = c * (*o - t);
                }
                if rg(*y) {
                    accumulate(grads, *y, gh.map(|v| -v));
                }
                if rg(*h) {
                    accumulate(grads, *h, gh);
                }
            }
            Op::GaussianNll { y, mu, log_sigma } => {
                let (ty, tm, ts) = (val(*y), val(*mu), val(*log_sigma));
                let c = g.item() / ty.rows().max(1) as f64;
                let mut gy = Tensor::zeros(ty.rows(), ty.cols());
                let mut gs = Tensor::zeros(ty.rows(), ty.cols());
                for j in 0..ty.len() {
                    let inv = (-ts.data()[j]).exp();
                    let z = (ty.data()[j] - tm.data()[j]) * inv;
                    gy.data_mut()[j] = c * z * inv;
                    gs.data_mut()[j] = c * (1.0 - z * z);
                }
                if rg(*mu) {
                    accumulate(grads, *mu, gy.map(|v| -v));
                }
                if rg(*y) {
                    accumulate(grads, *y, gy);
                }
                if rg(*log_sigma) {
                    accumulate(grads, *log_sigma, gs);
                }
            }
            Op::MulConst(x, c) => {
                let mut gx = g;
                for (o, m) in gx.data_mut().iter_mut().zip(c.data()) {
                    *o *= m;
                }
                accumulate(grads, *x, gx);
            }
            Op::Scale(x, s) => {
                accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Clamp(x, lo, hi) => {
                let mut gx = g;
                for (o, &v) in gx.data_mut().iter_mut().zip(val(*x).data()) {
                    if v < *lo || v > *hi {
                        *o = 0.0;
                    }
                }
                accumulate(grads, *x, gx);
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `p ⊙ (g − rowsum(g ⊙ p))`.
fn softmax_backward(p: &Tensor, g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(p.rows(), p.cols());
    for r in 0..p.rows() {
        let (pr, gr) = (p.row(r), g.row(r));
        let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for (o, (a, b)) in out.row_mut(r).iter_mut().zip(pr.iter().zip(gr)) {
            *o = a * (b - dot);
        }
    }
    out
}

/// Dense product without recording, for inference paths.
pub fn matmul_plain(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.rows() {
        return Err(mismatch("matmul", a, b));
    }
    let mut c = Tensor::zeros(a.rows(), b.cols());
    gemm(a, false, b, false, 0.0, &mut c);
    Ok(c)
}
