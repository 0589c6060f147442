//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] is an arena of nodes recorded in execution order; a [`Var`]
//! is an index into it. Backward replays the arena in reverse, so every
//! node is visited exactly once. Model parameters live in a [`ParamStore`]
//! and are bound onto a tape lazily by a [`Session`].

use std::borrow::Cow;
use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use crate::error::{HierarqError, Result};
use crate::tensor::{
    layer_norm_raw, matmul_nt_raw, matmul_raw, matmul_tn_raw, softmax_row_in_place, Scalar,
    Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleRows(Var, Var),
    Gelu(Var),
    Map(Var, fn(T) -> T),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        means: Vec<T>,
        rstds: Vec<T>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    Reshape(Var),
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<T>,
    },
}

#[derive(Debug, Clone)]
struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Leaves may borrow their values for `'a`.
#[derive(Debug, Clone, Default)]
pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    T::lit(0.5) * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    T::lit(0.5) * (T::one() + t)
        + T::lit(0.5) * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

fn dims2<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(HierarqError::dim(op, s, &[0, 0])),
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Owned(value), requires_grad)
    }

    pub fn borrowed_leaf(&mut self, value: &'a Tensor<T>, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Borrowed(value), requires_grad)
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(HierarqError::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(HierarqError::dim("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// a[m,k] · b[n,k]ᵀ
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul_nt", self.value(a))?;
        let (n, k2) = dims2("matmul_nt", self.value(b))?;
        if k != k2 {
            return Err(HierarqError::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let out = matmul_nt_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMulNT(a, b), &[a, b], "matmul_nt")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(HierarqError::dim("add", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    /// x[m,n] + bias[n] broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(bias).len() != n {
            return Err(HierarqError::dim("add_row", self.shape(x), self.shape(bias)));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &v) in row.iter_mut().zip(&b) {
                *o += v;
            }
        }
        self.push(out, Op::AddRow(x, bias), &[x, bias], "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(HierarqError::dim("mul", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        self.push(out, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o *= c;
        }
        self.push(out, Op::Scale(x, c), &[x], "scale")
    }

    /// x[m,n] with row i multiplied by g[i].
    pub fn scale_rows(&mut self, x: Var, g: Var) -> Result<Var> {
        let n = self.value(x).cols();
        let m = self.value(x).rows();
        if self.value(g).len() != m {
            return Err(HierarqError::dim("scale_rows", self.shape(x), self.shape(g)));
        }
        let mut out = self.value(x).clone();
        let gv = self.value(g).data().to_vec();
        for (row, &s) in out.data_mut().chunks_mut(n).zip(&gv) {
            for o in row {
                *o *= s;
            }
        }
        self.push(out, Op::ScaleRows(x, g), &[x, g], "scale_rows")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o = gelu(*o);
        }
        self.push(out, Op::Gelu(x), &[x], "gelu")
    }

    /// Elementwise `f` with a caller-supplied derivative `df`.
    pub fn map(&mut self, x: Var, f: fn(T) -> T, df: fn(T) -> T) -> Result<Var> {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o = f(*o);
        }
        self.push(out, Op::Map(x, df), &[x], "map")
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if n == 0 {
            return Err(HierarqError::dim("softmax_rows", self.shape(x), &[1]));
        }
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_row_in_place(row);
        }
        self.push(out, Op::Softmax(x), &[x], "softmax_rows")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let d = self.value(x).cols();
        if d == 0 || self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(HierarqError::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (out, means, rstds) = layer_norm_raw(
            self.value(x).data(),
            d,
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
        );
        let value = Tensor::new(self.shape(x), out)?;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                means,
                rstds,
            },
            &[x, gain, bias],
            "layer_norm",
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2("slice_cols", self.value(x))?;
        if start + len > n {
            return Err(HierarqError::dim("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        self.push(Tensor::new(&[m, len], out)?, Op::SliceCols { x, start }, &[x], "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = dims2("concat_cols", self.value(parts[0]))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = dims2("concat_cols", self.value(p))?;
            if pm != m {
                return Err(HierarqError::dim("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.push(Tensor::new(&[m, total], out)?, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = dims2("concat_rows", self.value(parts[0]))?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pm, pn) = dims2("concat_rows", self.value(p))?;
            if pn != n {
                return Err(HierarqError::dim("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += pm;
            out.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::new(&[rows, n], out)?, Op::ConcatRows(parts.to_vec()), parts, "concat_rows")
    }

    /// Column means of x[m,n] → [n].
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2("mean_rows", self.value(x))?;
        if m == 0 {
            return Err(HierarqError::dim("mean_rows", self.shape(x), &[1, n]));
        }
        let mut out = vec![T::zero(); n];
        for row in self.value(x).data().chunks(n) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = T::one() / T::from_usize(m).unwrap();
        out.iter_mut().for_each(|v| *v *= inv);
        self.push(Tensor::new(&[n], out)?, Op::MeanRows(x), &[x], "mean_rows")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push(v, Op::Reshape(x), &[x], "reshape")
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x], "sum_all")
    }

    /// Softmax cross-entropy of a flat logit vector against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits).data().to_vec();
        if label >= z.len() {
            return Err(HierarqError::Input(format!(
                "label {label} out of range for {} classes",
                z.len()
            )));
        }
        let mut probs = z.clone();
        softmax_row_in_place(&mut probs);
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        let loss = lse - z[label];
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            &[logits],
            "cross_entropy",
        )
    }

    /// Reverse pass from a scalar output. Returns one gradient slot per node;
    /// slots are filled only for nodes that require grad and are reachable.
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Vec<T>>>> {
        if self.value(loss).len() != 1 {
            return Err(HierarqError::dim("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, d) in acc.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node<'a, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.requires_grad(*a) {
                    // dA = G · Bᵀ
                    self.accumulate(grads, *a, matmul_nt_raw(g, bv.data(), m, n, k));
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · G
                    self.accumulate(grads, *b, matmul_tn_raw(av.data(), g, m, k, n));
                }
            }
            Op::MatMulNT(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[0];
                if self.requires_grad(*a) {
                    // dA = G · B
                    self.accumulate(grads, *a, matmul_raw(g, bv.data(), m, n, k));
                }
                if self.requires_grad(*b) {
                    // dB = Gᵀ · A
                    self.accumulate(grads, *b, matmul_tn_raw(g, av.data(), m, n, k));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, g.to_vec());
                if self.requires_grad(*bias) {
                    let n = self.value(*bias).len();
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bv).map(|(&g, &b)| g * b).collect());
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.iter().zip(av).map(|(&g, &a)| g * a).collect());
                }
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, g.iter().map(|&v| v * *c).collect());
            }
            Op::ScaleRows(x, s) => {
                let xv = self.value(*x);
                let n = xv.cols();
                let sv = self.value(*s).data();
                if self.requires_grad(*x) {
                    let dx = g
                        .chunks(n)
                        .zip(sv)
                        .flat_map(|(row, &s)| row.iter().map(move |&v| v * s))
                        .collect();
                    self.accumulate(grads, *x, dx);
                }
                if self.requires_grad(*s) {
                    let ds = g
                        .chunks(n)
                        .zip(xv.data().chunks(n))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(&a, &b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *s, ds);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, g.iter().zip(xv).map(|(&g, &x)| g * gelu_grad(x)).collect());
            }
            Op::Map(x, df) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, g.iter().zip(xv).map(|(&g, &x)| g * df(x)).collect());
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&y, &g)| y * (g - dot)));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                means,
                rstds,
            } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let d = gv.len();
                let dn = T::from_usize(d).unwrap();
                let mut dx = Vec::with_capacity(xv.len());
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                for (r, (xr, gr)) in xv.chunks(d).zip(g.chunks(d)).enumerate() {
                    let (mean, rstd) = (means[r], rstds[r]);
                    let xhat: Vec<T> = xr.iter().map(|&v| (v - mean) * rstd).collect();
                    let dxhat: Vec<T> = gr.iter().zip(gv).map(|(&g, &w)| g * w).collect();
                    let sum_d: T = dxhat.iter().copied().sum();
                    let sum_dx: T = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx.push(rstd / dn * (dn * dxhat[j] - sum_d - xhat[j] * sum_dx));
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dgain);
                self.accumulate(grads, *bias, dbias);
            }
            Op::SliceCols { x, start } => {
                let (m, n) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let len = node.value.cols();
                let mut dx = vec![T::zero(); m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let m = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.requires_grad(p) {
                        self.accumulate(grads, p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::MeanRows(x) => {
                let m = self.value(*x).rows();
                let inv = T::one() / T::from_usize(m).unwrap();
                let row: Vec<T> = g.iter().map(|&v| v * inv).collect();
                let dx = (0..m).flat_map(|_| row.iter().copied()).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let mut d: Vec<T> = probs.iter().map(|&p| p * g[0]).collect();
                d[*label] -= g[0];
                self.accumulate(grads, *logits, d);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total scalar count over all parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replace a tensor keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(HierarqError::dim("ParamStore::set", self.tensors[id.0].shape(), value.shape()));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// One gradient per parameter; `None` when the parameter was not reached.
pub type Gradients<T> = Vec<Option<Tensor<T>>>;

/// A tape bound to a parameter store.
pub struct Session<'p, T: Scalar> {
    tape: Tape<'p, T>,
    params: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
    track: bool,
}

impl<'p, T: Scalar> Session<'p, T> {
    /// `track` marks parameters as requiring grad.
    pub fn new(params: &'p ParamStore<T>, track: bool) -> Self {
        Session {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            track,
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn tracking(&self) -> bool {
        self.track
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.borrowed_leaf(self.params.get(id), self.track);
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of `loss` for every bound parameter.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        let grads = self.tape.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let v = (*b)?;
                let g = grads.get(v.0).cloned().flatten()?;
                Tensor::new(self.params.tensors[i].shape(), g).ok()
            })
            .collect())
    }
}

impl<'p, T: Scalar> Deref for Session<'p, T> {
    type Target = Tape<'p, T>;

    fn deref(&self) -> &Tape<'p, T> {
        &self.tape
    }
}

impl<'p, T: Scalar> DerefMut for Session<'p, T> {
    fn deref_mut(&mut self) -> &mut Tape<'p, T> {
        &mut self.tape
    }
}

/// Result of comparing tape gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compare analytic gradients against central finite differences for every
/// entry of every parameter in `params`.
///
/// `loss` builds a scalar on the session it is handed; it must be a
/// deterministic function of the parameter values.
pub fn grad_check<F>(params: &ParamStore<f64>, eps: f64, mut loss: F) -> Result<GradCheck>
where
    F: FnMut(&mut Session<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut s = Session::new(params, true);
        let l = loss(&mut s)?;
        if !s.value(l).is_finite() {
            return Err(HierarqError::NonFinite("grad_check loss"));
        }
        s.gradients(l)?
    };

    let mut eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut s = Session::new(p, false);
        let l = loss(&mut s)?;
        let v = s.value(l).data()[0];
        if v.is_finite() {
            Ok(v)
        } else {
            Err(HierarqError::NonFinite("grad_check loss"))
        }
    };

    let mut work = params.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for id in params.ids() {
        for j in 0..params.get(id).len() {
            let orig = params.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[id.0].as_ref().map_or(0.0, |g| g.data()[j]);
            let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params.name(id).to_string(), j));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_gradient() {
        let mut p = ParamStore::new();
        let x = p.add("x", Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let mut s = Session::new(&p, true);
        let v = s.param(x);
        let sq = s.mul(v, v).unwrap();
        let l = s.sum_all(sq).unwrap();
        let g = s.gradients(l).unwrap();
        assert_eq!(g[0].as_ref().unwrap().data(), &[2.0, 4.0, 6.0]);

        let report = grad_check(&p, 1e-5, |s| {
            let v = s.param(x);
            let sq = s.mul(v, v)?;
            s.sum_all(sq)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn wrong_vjp_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ParamStore::new();
        let x = p.add("x", Tensor::<f64>::randn(&[2, 3], 1.0, &mut rng));
        // sin with a deliberately wrong derivative
        let report = grad_check(&p, 1e-5, |s| {
            let v = s.param(x);
            let y = s.map(v, f64::sin, |t| t.cos() + 0.5)?;
            s.sum_all(y)
        })
        .unwrap();
        assert!(report.max_rel_error > 1e-2, "{report:?}");

        let report = grad_check(&p, 1e-5, |s| {
            let v = s.param(x);
            let y = s.map(v, f64::sin, f64::cos)?;
            s.sum_all(y)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn backward_visits_shared_inputs_once_each_use() {
        // y = x*x + x  → dy/dx = 2x + 1
        let mut p = ParamStore::new();
        let x = p.add("x", Tensor::new(&[2], vec![3.0, -1.0]).unwrap());
        let mut s = Session::new(&p, true);
        let v = s.param(x);
        let sq = s.mul(v, v).unwrap();
        let y = s.add(sq, v).unwrap();
        let l = s.sum_all(y).unwrap();
        let g = s.gradients(l).unwrap();
        assert_eq!(g[0].as_ref().unwrap().data(), &[7.0, -1.0]);
    }

    #[test]
    fn untracked_session_records_no_ops() {
        let mut p = ParamStore::new();
        let x = p.add("x", Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let mut s = Session::new(&p, false);
        let v = s.param(x);
        let y = s.gelu(v).unwrap();
        assert!(!s.requires_grad(y));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::new(&[1, 1], vec![f64::MAX]).unwrap());
        assert!(matches!(t.add(a, a), Err(HierarqError::NonFinite(_))));
    }
}
