//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node holding its output value plus whatever the backward
//! pass needs (softmax probabilities, layer-norm statistics). Nodes whose
//! inputs are all constants are marked `requires_grad = false` and skipped
//! during the reverse sweep, so frozen weights cost nothing beyond the forward.

use std::sync::Arc;

use super::kernels;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::positional::RopeTable;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    LayerNorm { x: Var, rstd: Vec<F> },
    Silu(Var),
    Gelu(Var),
    Softmax(Var),
    Rope { x: Var, table: Arc<RopeTable<F>> },
    Attention(Box<AttentionCache<F>>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRow { table: Var, index: usize },
    Sum(Var),
    Mse(Var, Var),
}

struct AttentionCache<F: Scalar> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    /// heads × n_q × n_k
    probs: Vec<F>,
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Boolean attention mask, `allowed[i * n_k + j]` for query `i` and key `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    pub n_q: usize,
    pub n_k: usize,
    pub allowed: Vec<bool>,
}

pub struct Tape<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by [`Var`]; `None` where nothing flowed.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn gelu_parts<F: Scalar>(x: F) -> (F, F) {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let a = F::of(0.044715);
    let half = F::of(0.5);
    let inner = c * (x + a * x * x * x);
    // tanh through one exp: much cheaper than the libm tanh, same accuracy here.
    let th = F::one() - F::of(2.0) / ((inner + inner).exp() + F::one());
    let y = half * x * (F::one() + th);
    let dy = half * (F::one() + th) + half * x * (F::one() - th * th) * c * (F::one() + F::of(3.0) * a * x * x);
    (y, dy)
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool, name: &str) -> Result<Var> {
        value.check_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg, "matmul")
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        self.value(a).zip_map(self.value(b), name, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    fn row_broadcast(&mut self, x: Var, row: Var, name: &'static str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let xv = self.value(x);
        let rv = self.value(row);
        let c = xv.cols();
        if rv.len() != c {
            return Err(mismatch(name, xv.shape(), rv.shape()));
        }
        let r = rv.data();
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (a, &b) in chunk.iter_mut().zip(r) {
                *a = f(*a, b);
            }
        }
        Ok(Tensor::from_parts(xv.shape().to_vec(), data))
    }

    /// `x + row`, broadcasting a single row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(x, row, "add_row", |a, b| a + b)?;
        let rg = self.rg(x) || self.rg(row);
        self.push(out, Op::AddRow(x, row), rg, "add_row")
    }

    /// `x ⊙ row`, broadcasting a single row over every row of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast(x, row, "mul_row", |a, b| a * b)?;
        let rg = self.rg(x) || self.rg(row);
        self.push(out, Op::MulRow(x, row), rg, "mul_row")
    }

    pub fn scale(&mut self, x: Var, s: F) -> Result<Var> {
        let out = self.value(x).scale(s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg, "scale")
    }

    pub fn add_scalar(&mut self, x: Var, s: F) -> Result<Var> {
        let out = self.value(x).map(|v| v + s);
        let rg = self.rg(x);
        self.push(out, Op::AddScalar(x), rg, "add_scalar")
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: F) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let inv_c = F::one() / F::of(c as f64);
        let mut data = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(xv.rows());
        for row in xv.data().chunks(c) {
            let mut mean = F::zero();
            for &v in row {
                mean += v;
            }
            mean *= inv_c;
            let mut var = F::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var *= inv_c;
            let r = F::one() / (var + eps).sqrt();
            rstd.push(r);
            data.extend(row.iter().map(|&v| (v - mean) * r));
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(out, Op::LayerNorm { x, rstd }, rg, "layer_norm")
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(x);
        self.push(out, Op::Silu(x), rg, "silu")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| gelu_parts(v).0);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg, "gelu")
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).softmax_rows();
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg, "softmax")
    }

    pub fn rope(&mut self, x: Var, table: Arc<RopeTable<F>>) -> Result<Var> {
        let out = table.apply(self.value(x))?;
        let rg = self.rg(x);
        self.push(out, Op::Rope { x, table }, rg, "rope")
    }

    /// Multi-head scaled dot-product attention. `q` is `n_q × d`, `k`/`v` are
    /// `n_k × d`; heads split the feature dimension into contiguous slices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&AttnMask>) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "{d} features do not split into {heads} heads"
            )));
        }
        if kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() {
            return Err(mismatch("attention", kv.shape(), vv.shape()));
        }
        let (nq, nk) = (qv.rows(), kv.rows());
        if let Some(m) = mask {
            if m.n_q != nq || m.n_k != nk || m.allowed.len() != nq * nk {
                return Err(mismatch("attention mask", &[m.n_q, m.n_k], &[nq, nk]));
            }
        }
        let dh = d / heads;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let mut out = vec![F::zero(); nq * d];
        let mut probs = vec![F::zero(); heads * nq * nk];
        let mut qh = vec![F::zero(); nq * dh];
        let mut kh = vec![F::zero(); nk * dh];
        let mut vh = vec![F::zero(); nk * dh];
        let mut oh = vec![F::zero(); nq * dh];
        for h in 0..heads {
            gather_cols(qv.data(), d, h * dh, dh, &mut qh);
            gather_cols(kv.data(), d, h * dh, dh, &mut kh);
            gather_cols(vv.data(), d, h * dh, dh, &mut vh);
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            kernels::matmul_nt(&qh, &kh, p, nq, dh, nk);
            for (i, row) in p.chunks_mut(nk).enumerate() {
                for (j, s) in row.iter_mut().enumerate() {
                    *s = if mask.is_none_or(|m| m.allowed[i * nk + j]) {
                        *s * scale
                    } else {
                        F::neg_infinity()
                    };
                }
                kernels::softmax_in_place(row);
            }
            kernels::matmul(p, &vh, &mut oh, nq, nk, dh);
            scatter_cols(&oh, &mut out, d, h * dh, dh);
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let cache = AttentionCache { q, k, v, heads, probs };
        self.push(
            Tensor::from_parts(vec![nq, d], out),
            Op::Attention(Box::new(cache)),
            rg,
            "attention",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&values)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, len)?;
        let rg = self.rg(x);
        self.push(out, Op::SliceRows { x, start }, rg, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if start + len > c {
            return Err(Error::InvalidArgument(format!(
                "column slice {start}..{} out of {c} columns",
                start + len
            )));
        }
        let mut data = vec![F::zero(); r * len];
        gather_cols(xv.data(), c, start, len, &mut data);
        let rg = self.rg(x);
        self.push(
            Tensor::from_parts(vec![r, len], data),
            Op::SliceCols { x, start },
            rg,
            "slice_cols",
        )
    }

    /// Selects one row of an embedding table.
    pub fn gather_row(&mut self, table: Var, index: usize) -> Result<Var> {
        let out = self.value(table).slice_rows(index, 1)?;
        let rg = self.rg(table);
        self.push(out, Op::GatherRow { table, index }, rg, "gather_row")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg, "sum")
    }

    /// Mean squared difference over all elements, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        av.same_shape(bv, "mse")?;
        let mut acc = F::zero();
        for (&x, &y) in av.data().iter().zip(bv.data()) {
            acc += (x - y) * (x - y);
        }
        let out = Tensor::scalar(acc / F::of(av.len() as f64));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mse(a, b), rg, "mse")
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<F>> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out.shape(), F::one()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, &x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.rg(*a) {
                    let mut da = vec![F::zero(); m * k];
                    kernels::matmul_nt(gd, bv.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), da));
                }
                if self.rg(*b) {
                    let mut db = vec![F::zero(); k * n];
                    kernels::matmul_tn_acc(av.data(), gd, &mut db, m, k, n);
                    self.accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-F::one()));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = g.zip_map(self.value(*b), "mul backward", |x, y| x * y)?;
                    self.accumulate(grads, *a, d);
                }
                if self.rg(*b) {
                    let d = g.zip_map(self.value(*a), "mul backward", |x, y| x * y)?;
                    self.accumulate(grads, *b, d);
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*row) {
                    let rv = self.value(*row);
                    let mut dr = vec![F::zero(); rv.len()];
                    for chunk in gd.chunks(rv.len()) {
                        for (d, &v) in dr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *row, Tensor::from_parts(rv.shape().to_vec(), dr));
                }
            }
            Op::MulRow(x, row) => {
                let (xv, rv) = (self.value(*x), self.value(*row));
                let c = rv.len();
                if self.rg(*x) {
                    let mut data = gd.to_vec();
                    for chunk in data.chunks_mut(c) {
                        for (a, &b) in chunk.iter_mut().zip(rv.data()) {
                            *a *= b;
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), data));
                }
                if self.rg(*row) {
                    let mut dr = vec![F::zero(); c];
                    for (gc, xc) in gd.chunks(c).zip(xv.data().chunks(c)) {
                        for ((d, &a), &b) in dr.iter_mut().zip(gc).zip(xc) {
                            *d += a * b;
                        }
                    }
                    self.accumulate(grads, *row, Tensor::from_parts(rv.shape().to_vec(), dr));
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.scale(*s)),
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::LayerNorm { x, rstd } => {
                let y = &node.value;
                let c = y.cols();
                let inv_c = F::one() / F::of(c as f64);
                let mut dx = Vec::with_capacity(y.len());
                for ((gr, yr), &r) in gd.chunks(c).zip(y.data().chunks(c)).zip(rstd) {
                    let mut mean_g = F::zero();
                    let mut mean_gy = F::zero();
                    for (&a, &b) in gr.iter().zip(yr) {
                        mean_g += a;
                        mean_gy += a * b;
                    }
                    mean_g *= inv_c;
                    mean_gy *= inv_c;
                    dx.extend(gr.iter().zip(yr).map(|(&a, &b)| r * (a - mean_g - b * mean_gy)));
                }
                self.accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| {
                        let s = sigmoid(v);
                        gv * s * (F::one() + v * (F::one() - s))
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), data));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = xv.data().iter().zip(gd).map(|(&v, &gv)| gv * gelu_parts(v).1).collect();
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), data));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = Vec::with_capacity(y.len());
                for (gr, yr) in gd.chunks(c).zip(y.data().chunks(c)) {
                    let mut dot = F::zero();
                    for (&a, &b) in gr.iter().zip(yr) {
                        dot += a * b;
                    }
                    dx.extend(gr.iter().zip(yr).map(|(&a, &b)| b * (a - dot)));
                }
                self.accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::Rope { x, table } => {
                let dx = table.apply_inverse(g)?;
                self.accumulate(grads, *x, dx);
            }
            Op::Attention(cache) => self.attention_backward(cache, gd, grads),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.len();
                    if self.rg(p) {
                        let d = Tensor::from_parts(pv.shape().to_vec(), gd[offset..offset + n].to_vec());
                        self.accumulate(grads, p, d);
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![F::zero(); xv.len()];
                dx[start * c..start * c + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let len = g.cols();
                let mut dx = vec![F::zero(); xv.len()];
                scatter_cols(gd, &mut dx, c, *start, len);
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::GatherRow { table, index } => {
                let tv = self.value(*table);
                let c = tv.cols();
                let mut dt = vec![F::zero(); tv.len()];
                dt[index * c..(index + 1) * c].copy_from_slice(gd);
                self.accumulate(grads, *table, Tensor::from_parts(tv.shape().to_vec(), dt));
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, Tensor::full(xv.shape(), gd[0]));
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = gd[0] * F::of(2.0) / F::of(av.len() as f64);
                let diff = av.zip_map(bv, "mse backward", |x, y| (x - y) * k)?;
                if self.rg(*b) {
                    self.accumulate(grads, *b, diff.scale(-F::one()));
                }
                self.accumulate(grads, *a, diff);
            }
        }
        Ok(())
    }

    fn attention_backward(&self, cache: &AttentionCache<F>, gd: &[F], grads: &mut [Option<Tensor<F>>]) {
        let (qv, kv, vv) = (self.value(cache.q), self.value(cache.k), self.value(cache.v));
        let (nq, nk, d) = (qv.rows(), kv.rows(), qv.cols());
        let heads = cache.heads;
        let dh = d / heads;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let mut dq = vec![F::zero(); nq * d];
        let mut dk = vec![F::zero(); nk * d];
        let mut dv = vec![F::zero(); nk * d];
        let mut qh = vec![F::zero(); nq * dh];
        let mut kh = vec![F::zero(); nk * dh];
        let mut vh = vec![F::zero(); nk * dh];
        let mut goh = vec![F::zero(); nq * dh];
        let mut dp = vec![F::zero(); nq * nk];
        let mut tmp_q = vec![F::zero(); nq * dh];
        for h in 0..heads {
            let p = &cache.probs[h * nq * nk..(h + 1) * nq * nk];
            gather_cols(qv.data(), d, h * dh, dh, &mut qh);
            gather_cols(kv.data(), d, h * dh, dh, &mut kh);
            gather_cols(vv.data(), d, h * dh, dh, &mut vh);
            gather_cols(gd, d, h * dh, dh, &mut goh);

            let mut dvh = vec![F::zero(); nk * dh];
            kernels::matmul_tn_acc(p, &goh, &mut dvh, nq, nk, dh);
            scatter_cols(&dvh, &mut dv, d, h * dh, dh);

            kernels::matmul_nt(&goh, &vh, &mut dp, nq, dh, nk);
            for (pr, dr) in p.chunks(nk).zip(dp.chunks_mut(nk)) {
                let mut dot = F::zero();
                for (&a, &b) in pr.iter().zip(dr.iter()) {
                    dot += a * b;
                }
                for (&a, b) in pr.iter().zip(dr.iter_mut()) {
                    *b = a * (*b - dot) * scale;
                }
            }
            kernels::matmul(&dp, &kh, &mut tmp_q, nq, nk, dh);
            scatter_cols(&tmp_q, &mut dq, d, h * dh, dh);
            let mut dkh = vec![F::zero(); nk * dh];
            kernels::matmul_tn_acc(&dp, &qh, &mut dkh, nq, nk, dh);
            scatter_cols(&dkh, &mut dk, d, h * dh, dh);
        }
        self.accumulate(grads, cache.q, Tensor::from_parts(qv.shape().to_vec(), dq));
        self.accumulate(grads, cache.k, Tensor::from_parts(kv.shape().to_vec(), dk));
        self.accumulate(grads, cache.v, Tensor::from_parts(vv.shape().to_vec(), dv));
    }
}

fn gather_cols<F: Scalar>(src: &[F], stride: usize, start: usize, len: usize, dst: &mut [F]) {
    for (d, s) in dst.chunks_mut(len).zip(src.chunks(stride)) {
        d.copy_from_slice(&s[start..start + len]);
    }
}

fn scatter_cols<F: Scalar>(src: &[F], dst: &mut [F], stride: usize, start: usize, len: usize) {
    for (s, d) in src.chunks(len).zip(dst.chunks_mut(stride)) {
        d[start..start + len].copy_from_slice(s);
    }
}
