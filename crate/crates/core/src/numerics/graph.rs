//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the vector-Jacobian product. Node indices are therefore already
//! in topological order and `backward` walks them once, in reverse.

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{Float, Tensor};
use crate::error::{CitiError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous run of rows belonging to one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

/// One supervised row of a cross-entropy: `logits[row]` should predict `target`.
#[derive(Debug, Clone, Copy)]
pub struct CeTarget {
    pub row: usize,
    pub target: usize,
    pub weight: f64,
}

enum Op<T: Float> {
    Input,
    Param(ParamId),
    MatMul { a: Var, b: Var, bt: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor<T>),
    Scale(Var, T),
    Square(Var),
    Silu(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    Gather { table: Var, ids: Vec<usize> },
    RmsNorm { x: Var, gain: Var, inv: Vec<T> },
    Attention { q: Var, k: Var, v: Var, spans: Vec<Span>, heads: usize, probs: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<CeTarget>, probs: Vec<T> },
    ScaleByColumn { x: Var, gates: Var, col: usize },
    VarOverMean(Var),
}

impl<T: Float> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulConst(..) => "mul_const",
            Op::Scale(..) => "scale",
            Op::Square(_) => "square",
            Op::Silu(_) => "silu",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Softmax(_) => "softmax",
            Op::Gather { .. } => "gather",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Attention { .. } => "causal_attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::ScaleByColumn { .. } => "scale_by_column",
            Op::VarOverMean(_) => "variance_over_mean",
        }
    }
}

struct Node<T: Float> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The tape. One graph per forward pass; not shared between threads.
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const RMS_EPS: f64 = 1e-6;

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never requests gradients (inference).
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(CitiError::numeric(op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Input, false)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        let p = store.get(id);
        self.push(p.tensor.clone(), Op::Param(id), p.trainable)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> CitiError {
        CitiError::Shape {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    /// `a · b`, or `a · bᵀ` when `bt` (the usual `x Wᵀ` of a linear layer).
    pub fn matmul_impl(&mut self, a: Var, b: Var, bt: bool) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (br, bc) = self.value(b).dims2();
        let (kb, n) = if bt { (bc, br) } else { (br, bc) };
        if k != kb || self.value(a).shape().len() > 2 || self.value(b).shape().len() > 2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            bt,
            out.data_mut(),
            false,
        );
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul { a, b, bt }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err(name, a, b));
        }
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let va = self.value(a);
        Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Result<Var> {
        if self.value(a).shape() != c.shape() {
            return Err(CitiError::Shape {
                op: "mul_const",
                lhs: self.value(a).shape().to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let out = Tensor::new(
            c.shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(c.data())
                .map(|(&x, &y)| x * y)
                .collect(),
        )?;
        let rg = self.rg(&[a]);
        self.push(out, Op::MulConst(a, c), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.map(a, |x| x * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| x * x);
        let rg = self.rg(&[a]);
        self.push(out, Op::Square(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| x * sigmoid(x));
        let rg = self.rg(&[a]);
        self.push(out, Op::Silu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = T::from_usize(self.value(a).numel()).unwrap();
        let out = Tensor::scalar(self.value(a).sum() / n);
        let rg = self.rg(&[a]);
        self.push(out, Op::Mean(a), rg)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (rows, cols) = va.dims2();
        let mut out = va.clone();
        for r in 0..rows {
            softmax_in_place(&mut out.data_mut()[r * cols..(r + 1) * cols]);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Selects rows of `table` (an embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let (rows, cols) = vt.dims2();
        if ids.is_empty() {
            return Err(CitiError::contract("gather with no ids"));
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= rows {
                return Err(CitiError::Shape {
                    op: "gather",
                    lhs: vt.shape().to_vec(),
                    rhs: vec![i],
                });
            }
            data.extend_from_slice(vt.row(i));
        }
        let out = Tensor::from_rows(ids.len(), cols, data)?;
        let rg = self.rg(&[table]);
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Root-mean-square normalization of each row, times a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2();
        if self.value(gain).numel() != cols {
            return Err(self.shape_err("rms_norm", x, gain));
        }
        let eps = T::from_f64_lossy(RMS_EPS);
        let n = T::from_usize(cols).unwrap();
        let vx = self.value(x);
        let g = self.value(gain).data();
        let mut out = Tensor::zeros(&[rows, cols]);
        let mut inv = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = vx.row(r);
            let ms = row.iter().map(|&v| v * v).sum::<T>() / n;
            let iv = T::one() / (ms + eps).sqrt();
            inv.push(iv);
            let o = &mut out.data_mut()[r * cols..(r + 1) * cols];
            for c in 0..cols {
                o[c] = row[c] * iv * g[c];
            }
        }
        let rg = self.rg(&[x, gain]);
        self.push(out, Op::RmsNorm { x, gain, inv }, rg)
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[rows, d]`; each span is attended independently and
    /// a row only sees rows at or before it within its own span.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, spans: &[Span], heads: usize) -> Result<Var> {
        let (rows, d) = self.value(q).dims2();
        if self.value(k).shape() != self.value(q).shape() {
            return Err(self.shape_err("causal_attention", q, k));
        }
        if self.value(v).shape() != self.value(q).shape() {
            return Err(self.shape_err("causal_attention", q, v));
        }
        if heads == 0 || d % heads != 0 {
            return Err(CitiError::contract(format!("{d} columns not divisible into {heads} heads")));
        }
        let covered: usize = spans.iter().map(|s| s.len).sum();
        if covered != rows || spans.iter().any(|s| s.start + s.len > rows) {
            return Err(CitiError::contract("attention spans do not tile the input rows"));
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = Tensor::zeros(&[rows, d]);
        let mut probs = Vec::with_capacity(spans.iter().map(|s| s.len * s.len).sum::<usize>() * heads);
        let od = out.data_mut();
        for s in spans {
            for h in 0..heads {
                let off = h * dh;
                let base = probs.len();
                probs.resize(base + s.len * s.len, T::zero());
                for i in 0..s.len {
                    let qi = &qd[(s.start + i) * d + off..(s.start + i) * d + off + dh];
                    let prow = &mut probs[base + i * s.len..base + (i + 1) * s.len];
                    for j in 0..=i {
                        let kj = &kd[(s.start + j) * d + off..(s.start + j) * d + off + dh];
                        prow[j] = dot(qi, kj) * scale;
                    }
                    softmax_in_place(&mut prow[..=i]);
                    let orow = &mut od[(s.start + i) * d + off..(s.start + i) * d + off + dh];
                    for j in 0..=i {
                        let p = prow[j];
                        let vj = &vd[(s.start + j) * d + off..(s.start + j) * d + off + dh];
                        for c in 0..dh {
                            orow[c] += p * vj[c];
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                spans: spans.to_vec(),
                heads,
                probs,
            },
            rg,
        )
    }

    /// Weighted sum of token negative log-likelihoods: `Σ w · (logsumexp(z) − z[target])`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[CeTarget]) -> Result<Var> {
        let vl = self.value(logits);
        let (rows, cols) = vl.dims2();
        let mut probs = Vec::with_capacity(targets.len() * cols);
        let mut total = 0.0f64;
        for t in targets {
            if t.row >= rows || t.target >= cols {
                return Err(CitiError::Shape {
                    op: "cross_entropy",
                    lhs: vl.shape().to_vec(),
                    rhs: vec![t.row, t.target],
                });
            }
            let row = vl.row(t.row);
            let mut p = row.to_vec();
            softmax_in_place(&mut p);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            total += t.weight * (lse - row[t.target]).as_f64();
            probs.extend(p);
        }
        let out = Tensor::scalar(T::from_f64_lossy(total));
        let rg = self.rg(&[logits]);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Scales row `r` of `x` by `gates[r, col]`.
    pub fn scale_by_column(&mut self, x: Var, gates: Var, col: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2();
        let (grows, gcols) = self.value(gates).dims2();
        if rows != grows || col >= gcols {
            return Err(self.shape_err("scale_by_column", x, gates));
        }
        let vg = self.value(gates).data();
        let mut out = self.value(x).clone();
        for r in 0..rows {
            let g = vg[r * gcols + col];
            out.data_mut()[r * cols..(r + 1) * cols]
                .iter_mut()
                .for_each(|v| *v *= g);
        }
        let rg = self.rg(&[x, gates]);
        self.push(out, Op::ScaleByColumn { x, gates, col }, rg)
    }

    /// Population variance of all entries divided by their mean.
    pub fn variance_over_mean(&mut self, a: Var) -> Result<Var> {
        let (mean, var) = mean_var(self.value(a).data());
        if mean <= 1e-12 {
            return Err(CitiError::contract(format!(
                "variance_over_mean needs a positive mean, got {mean:e}"
            )));
        }
        let out = Tensor::scalar(T::from_f64_lossy(var / mean));
        let rg = self.rg(&[a]);
        self.push(out, Op::VarOverMean(a), rg)
    }

    /// Reverse pass from a scalar node. Returns the gradient of every
    /// trainable parameter reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(CitiError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut result = Gradients::new();
        if !self.nodes[loss.0].requires_grad {
            return Ok(result);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, g, &mut grads, &mut result)?;
        }
        Ok(result)
    }

    /// Backward pass that also accumulates into the store's `grad` slots.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.backward(loss)?;
        store.accumulate(&grads);
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        result: &mut Gradients<T>,
    ) -> Result<()> {
        let mut send = |v: Var, t: Tensor<T>| {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                if !g.all_finite() {
                    return Err(CitiError::numeric(format!("gradient of parameter #{}", id.0)));
                }
                result.insert_or_add(*id, g);
            }
            Op::MatMul { a, b, bt } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = va.dims2();
                let n = g.dims2().1;
                if self.wants(*a) {
                    let mut da = Tensor::zeros(va.shape());
                    // da = g · b_opᵀ
                    T::gemm(m, n, k, g.data(), false, vb.data(), !*bt, da.data_mut(), false);
                    send(*a, da);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(vb.shape());
                    if *bt {
                        // stored [n,k]: db = gᵀ · a
                        T::gemm(n, m, k, g.data(), true, va.data(), false, db.data_mut(), false);
                    } else {
                        // stored [k,n]: db = aᵀ · g
                        T::gemm(k, m, n, va.data(), true, g.data(), false, db.data_mut(), false);
                    }
                    send(*b, db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    send(*a, g.clone());
                }
                if self.wants(*b) {
                    send(*b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    send(*a, g.clone());
                }
                if self.wants(*b) {
                    let mut n = g;
                    n.scale_in_place(-T::one());
                    send(*b, n);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    send(*a, hadamard(&g, self.value(*b)));
                }
                if self.wants(*b) {
                    send(*b, hadamard(&g, self.value(*a)));
                }
            }
            Op::MulConst(a, c) => send(*a, hadamard(&g, c)),
            Op::Scale(a, s) => {
                let mut t = g;
                t.scale_in_place(*s);
                send(*a, t);
            }
            Op::Square(a) => {
                let va = self.value(*a);
                let two = T::one() + T::one();
                let mut t = hadamard(&g, va);
                t.scale_in_place(two);
                send(*a, t);
            }
            Op::Silu(a) => {
                let va = self.value(*a);
                let mut t = g;
                for (gv, &x) in t.data_mut().iter_mut().zip(va.data()) {
                    let s = sigmoid(x);
                    *gv *= s * (T::one() + x * (T::one() - s));
                }
                send(*a, t);
            }
            Op::Sum(a) => send(*a, Tensor::full(self.value(*a).shape(), g.item())),
            Op::Mean(a) => {
                let va = self.value(*a);
                let n = T::from_usize(va.numel()).unwrap();
                send(*a, Tensor::full(va.shape(), g.item() / n));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let (rows, cols) = y.dims2();
                let mut t = Tensor::zeros(y.shape());
                for r in 0..rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let inner: T = dot(yr, gr);
                    let tr = &mut t.data_mut()[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        tr[c] = yr[c] * (gr[c] - inner);
                    }
                }
                send(*a, t);
            }
            Op::Gather { table, ids } => {
                let vt = self.value(*table);
                let cols = vt.dims2().1;
                let mut t = Tensor::zeros(vt.shape());
                for (r, &i) in ids.iter().enumerate() {
                    let src = g.row(r);
                    let dst = &mut t.data_mut()[i * cols..(i + 1) * cols];
                    for c in 0..cols {
                        dst[c] += src[c];
                    }
                }
                send(*table, t);
            }
            Op::RmsNorm { x, gain, inv } => {
                let vx = self.value(*x);
                let vg = self.value(*gain).data();
                let (rows, cols) = vx.dims2();
                let n = T::from_usize(cols).unwrap();
                let mut dx = Tensor::zeros(vx.shape());
                let mut dgain = Tensor::zeros(self.value(*gain).shape());
                for r in 0..rows {
                    let xr = vx.row(r);
                    let gr = g.row(r);
                    let iv = inv[r];
                    let mut proj = T::zero();
                    for c in 0..cols {
                        let xhat = xr[c] * iv;
                        dgain.data_mut()[c] += gr[c] * xhat;
                        proj += gr[c] * vg[c] * xhat;
                    }
                    proj = proj / n;
                    let dr = &mut dx.data_mut()[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        let xhat = xr[c] * iv;
                        dr[c] = iv * (gr[c] * vg[c] - xhat * proj);
                    }
                }
                if self.wants(*x) {
                    send(*x, dx);
                }
                if self.wants(*gain) {
                    send(*gain, dgain);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spans,
                heads,
                probs,
            } => {
                let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (_, d) = vq.dims2();
                let dh = d / heads;
                let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
                let mut dq = Tensor::zeros(vq.shape());
                let mut dk = Tensor::zeros(vk.shape());
                let mut dv = Tensor::zeros(vv.shape());
                let (qd, kd, vd, gd) = (vq.data(), vk.data(), vv.data(), g.data());
                let mut base = 0;
                let mut ds_row = Vec::new();
                for s in spans {
                    for h in 0..*heads {
                        let off = h * dh;
                        for i in 0..s.len {
                            let prow = &probs[base + i * s.len..base + i * s.len + i + 1];
                            let gi = &gd[(s.start + i) * d + off..(s.start + i) * d + off + dh];
                            ds_row.clear();
                            let mut inner = T::zero();
                            for j in 0..=i {
                                let vrow = (s.start + j) * d + off;
                                let dp = dot(gi, &vd[vrow..vrow + dh]);
                                inner += prow[j] * dp;
                                ds_row.push(dp);
                                let dvr = &mut dv.data_mut()[vrow..vrow + dh];
                                for c in 0..dh {
                                    dvr[c] += prow[j] * gi[c];
                                }
                            }
                            let qrow = (s.start + i) * d + off;
                            for j in 0..=i {
                                let dsij = prow[j] * (ds_row[j] - inner) * scale;
                                let krow = (s.start + j) * d + off;
                                for c in 0..dh {
                                    dq.data_mut()[qrow + c] += dsij * kd[krow + c];
                                    dk.data_mut()[krow + c] += dsij * qd[qrow + c];
                                }
                            }
                        }
                        base += s.len * s.len;
                    }
                }
                if self.wants(*q) {
                    send(*q, dq);
                }
                if self.wants(*k) {
                    send(*k, dk);
                }
                if self.wants(*v) {
                    send(*v, dv);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let vl = self.value(*logits);
                let cols = vl.dims2().1;
                let up = g.item();
                let mut t = Tensor::zeros(vl.shape());
                for (i, ce) in targets.iter().enumerate() {
                    let w = up * T::from_f64_lossy(ce.weight);
                    let p = &probs[i * cols..(i + 1) * cols];
                    let dst = &mut t.data_mut()[ce.row * cols..(ce.row + 1) * cols];
                    for c in 0..cols {
                        dst[c] += w * p[c];
                    }
                    dst[ce.target] -= w;
                }
                send(*logits, t);
            }
            Op::ScaleByColumn { x, gates, col } => {
                let vx = self.value(*x);
                let vg = self.value(*gates);
                let (rows, cols) = vx.dims2();
                let gcols = vg.dims2().1;
                if self.wants(*x) {
                    let mut dx = g.clone();
                    for r in 0..rows {
                        let s = vg.data()[r * gcols + col];
                        dx.data_mut()[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .for_each(|v| *v *= s);
                    }
                    send(*x, dx);
                }
                if self.wants(*gates) {
                    let mut dg = Tensor::zeros(vg.shape());
                    for r in 0..rows {
                        dg.data_mut()[r * gcols + col] = dot(g.row(r), vx.row(r));
                    }
                    send(*gates, dg);
                }
            }
            Op::VarOverMean(a) => {
                let va = self.value(*a);
                let (mean, var) = mean_var(va.data());
                let n = va.numel() as f64;
                let up = g.item().as_f64();
                let t = Tensor::new(
                    va.shape().to_vec(),
                    va.data()
                        .iter()
                        .map(|&z| {
                            let z = z.as_f64();
                            T::from_f64_lossy(up * (2.0 * (z - mean) / (n * mean) - var / (mean * mean * n)))
                        })
                        .collect(),
                )?;
                send(*a, t);
            }
        }
        Ok(())
    }
}

/// Mean and population variance via the shifted-data formula, which is exact
/// (zero variance) when all entries are equal.
fn mean_var<T: Float>(data: &[T]) -> (f64, f64) {
    let n = data.len() as f64;
    let shift = data[0].as_f64();
    let (mut s1, mut s2) = (0.0f64, 0.0f64);
    for v in data {
        let d = v.as_f64() - shift;
        s1 += d;
        s2 += d * d;
    }
    let var = ((s2 - s1 * s1 / n) / n).max(0.0);
    (shift + s1 / n, var)
}

fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn hadamard<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect(),
    )
    .expect("same shape")
}

pub(crate) fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(vec![0.0; 4])).unwrap();
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::identity(3)).unwrap();
        let xt = Tensor::from_rows(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let x = g.constant(xt.clone()).unwrap();
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y), &xt);
    }

    #[test]
    fn perfect_prediction_has_zero_cross_entropy() {
        let mut g = Graph::<f64>::new();
        // One-hot on class 2 with an enormous margin; softmax saturates to exactly 1.
        let logits = g
            .constant(Tensor::from_rows(1, 3, vec![-1e3, -1e3, 1e3]).unwrap())
            .unwrap();
        let l = g
            .cross_entropy(logits, &[CeTarget { row: 0, target: 2, weight: 1.0 }])
            .unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn square_sum_gradient() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("x", Tensor::from_vec(vec![1.0, 2.0]), true).unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, p).unwrap();
        let sq = g.square(x).unwrap();
        let l = g.sum(sq).unwrap();
        g.backward_into(l, &mut store).unwrap();
        assert_eq!(store.get(p).grad.as_ref().unwrap().data(), &[2.0, 4.0]);
        // Accumulation is additive until cleared.
        g.backward_into(l, &mut store).unwrap();
        assert_eq!(store.get(p).grad.as_ref().unwrap().data(), &[4.0, 8.0]);
        store.zero_grads();
        assert!(store.get(p).grad.is_none());
    }

    #[test]
    fn unreachable_parameter_has_no_grad() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("p", Tensor::from_vec(vec![1.0]), true).unwrap();
        let q = store.add("q", Tensor::from_vec(vec![3.0]), true).unwrap();
        let mut g = Graph::new();
        let _ = g.param(&store, p).unwrap();
        let x = g.param(&store, q).unwrap();
        let l = g.sum(x).unwrap();
        g.backward_into(l, &mut store).unwrap();
        assert!(store.get(p).grad.is_none());
        assert!(store.get(q).grad.is_some());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(CitiError::Contract(_))));
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        match g.matmul(a, b) {
            Err(CitiError::Shape { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}", other = other.map(|_| ())),
        }
    }

    #[test]
    fn non_finite_results_are_faults() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::from_vec(vec![f32::MAX])).unwrap();
        assert!(matches!(g.scale(a, 10.0), Err(CitiError::NumericFault(_))));
    }

    #[test]
    fn variance_over_mean_hand_values() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::from_vec(vec![0.0, 2.0])).unwrap();
        let l = g.variance_over_mean(z).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        let u = g.constant(Tensor::full(&[3, 5], 0.2)).unwrap();
        let l = g.variance_over_mean(u).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }
}
