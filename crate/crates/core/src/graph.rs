//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node whose inputs are earlier node ids, so the tape is
//! topologically ordered by construction and `backward` is a single reverse
//! sweep. The op set is exactly what the caption decoder needs.

use std::borrow::Cow;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm, layer_norm_cached, softmax_row, NdArray};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which keys a query may see inside one attention block.
#[derive(Clone, Debug, PartialEq)]
pub enum Visibility {
    /// Query `i` sees keys `0..=i`.
    Causal,
    /// Every query sees every (valid) key.
    Full,
    /// Explicit `q_len × k_len` row-major visibility table.
    Explicit(Vec<bool>),
}

/// One independent attention problem inside a packed batch.
#[derive(Clone, Debug)]
pub struct AttnBlock {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    /// Number of leading keys that are real (the rest are padding).
    pub k_valid: usize,
}

#[derive(Clone, Debug)]
pub struct AttnLayout {
    pub blocks: Vec<AttnBlock>,
    pub heads: usize,
    pub visibility: Visibility,
}

impl AttnLayout {
    fn visible(&self, block: &AttnBlock, i: usize, j: usize) -> bool {
        if j >= block.k_valid {
            return false;
        }
        match &self.visibility {
            Visibility::Causal => j <= i,
            Visibility::Full => true,
            Visibility::Explicit(table) => table[i * block.k_len + j],
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    Reshape(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
        scale: f64,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<bool>,
        probs: Vec<f64>,
    },
    WeightedMean {
        terms: Vec<Var>,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, NdArray>,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<NdArray>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&NdArray> {
        self.grads[var.0].as_ref()
    }

    pub fn take(&mut self, var: Var) -> Option<NdArray> {
        self.grads[var.0].take()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &NdArray {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: NdArray, op: Op, needs_grad: bool) -> Var {
        self.push_cow(Cow::Owned(value), op, needs_grad)
    }

    fn push_cow(&mut self, value: Cow<'a, NdArray>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: NdArray) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; no gradient is accumulated for it.
    pub fn constant(&mut self, value: NdArray) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf borrowed from outside the graph.
    pub fn param_ref(&mut self, value: &'a NdArray) -> Var {
        self.push_cow(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// A constant leaf borrowed from outside the graph.
    pub fn constant_ref(&mut self, value: &'a NdArray) -> Var {
        self.push_cow(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::matmul(self.value(a), self.value(b))?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), needs))
    }

    /// `x` (rows × n) plus a length-`n` bias broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.value(x).as_matrix_dims();
        if self.value(bias).len() != cols {
            return Err(Error::Shape(format!(
                "bias {:?} for rows of width {cols}",
                self.value(bias).shape()
            )));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(cols) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        let needs = self.needs(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), needs))
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xw = self.matmul(x, weight)?;
        self.add_bias(xw, bias)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = NdArray::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= factor);
        let needs = self.needs(&[x]);
        self.push(out, Op::Scale(x, factor), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let needs = self.needs(&[x]);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = NdArray::scalar(self.value(x).sum());
        let needs = self.needs(&[x]);
        self.push(out, Op::Sum(x), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let (_, cols) = out.as_matrix_dims();
        out.data_mut().chunks_mut(cols).for_each(softmax_row);
        let needs = self.needs(&[x]);
        self.push(out, Op::Softmax(x), needs)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (out, xhat, rstd) =
            layer_norm_cached(self.value(x), self.value(gain), self.value(bias), eps)?;
        let needs = self.needs(&[x, gain, bias]);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, needs))
    }

    /// Gathers rows of `table` by id and multiplies them by `scale`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], scale: f64) -> Result<Var> {
        let (rows, cols) = self.value(table).as_matrix_dims();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Invalid(format!("token id {id} outside table of {rows}")));
            }
            data.extend(self.value(table).row(id).iter().map(|v| v * scale));
        }
        let out = NdArray::new(vec![ids.len(), cols], data)?;
        let needs = self.needs(&[table]);
        Ok(self.push(
            out,
            Op::Embedding { table, ids: ids.to_vec(), scale },
            needs,
        ))
    }

    /// Inverted dropout: kept units are scaled by `1/(1-rate)`.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mut out = self.value(x).clone();
        for (v, m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let needs = self.needs(&[x]);
        self.push(out, Op::Dropout { x, mask }, needs)
    }

    /// Multi-head scaled dot-product attention over packed blocks.
    ///
    /// `q` is (Σ q rows) × d, `k` and `v` are (Σ k rows) × d. Query rows not
    /// covered by any block, and queries with no visible key, produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Result<Var> {
        let (q_rows, d) = self.value(q).as_matrix_dims();
        let (k_rows, dk) = self.value(k).as_matrix_dims();
        let (v_rows, dv) = self.value(v).as_matrix_dims();
        if dk != d || dv != d || v_rows != k_rows {
            return Err(Error::Shape(format!(
                "attention q {:?}, k {:?}, v {:?}",
                self.value(q).shape(),
                self.value(k).shape(),
                self.value(v).shape()
            )));
        }
        if layout.heads == 0 || d % layout.heads != 0 {
            return Err(Error::Shape(format!("{} heads do not divide width {d}", layout.heads)));
        }
        for b in &layout.blocks {
            if b.q_start + b.q_len > q_rows || b.k_start + b.k_len > k_rows || b.k_valid > b.k_len {
                return Err(Error::Shape(format!("attention block {b:?} out of range")));
            }
            if let Visibility::Explicit(t) = &layout.visibility {
                if t.len() != b.q_len * b.k_len {
                    return Err(Error::Shape("explicit visibility table size".into()));
                }
            }
        }
        let heads = layout.heads;
        let dh = d / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; q_rows * d];
        let total: usize = layout.blocks.iter().map(|b| b.q_len * b.k_len * heads).sum();
        let mut probs = Vec::with_capacity(total);
        let mut scores = Vec::new();
        for b in &layout.blocks {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..b.q_len {
                    let qi = &qd[(b.q_start + i) * d + off..][..dh];
                    scores.clear();
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..b.k_len {
                        if layout.visible(b, i, j) {
                            let kj = &kd[(b.k_start + j) * d + off..][..dh];
                            let s = dot(qi, kj) * inv_sqrt;
                            max = max.max(s);
                            scores.push(s);
                        } else {
                            scores.push(f64::NEG_INFINITY);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        probs.extend(std::iter::repeat(0.0).take(b.k_len));
                        continue;
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let orow = &mut out[(b.q_start + i) * d + off..][..dh];
                    for (j, s) in scores.iter().enumerate() {
                        let p = s / z;
                        probs.push(p);
                        if p != 0.0 {
                            let vj = &vd[(b.k_start + j) * d + off..][..dh];
                            for (o, vv) in orow.iter_mut().zip(vj) {
                                *o += p * vv;
                            }
                        }
                    }
                }
            }
        }
        let out = NdArray::new(vec![q_rows, d], out)?;
        let needs = self.needs(&[q, k, v]);
        Ok(self.push(out, Op::Attention { q, k, v, layout, probs }, needs))
    }

    /// Mean over weighted rows of `-log softmax(logits)[row, target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[bool]) -> Result<Var> {
        let (rows, vocab) = self.value(logits).as_matrix_dims();
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::Shape(format!(
                "{} targets / {} weights for {rows} logit rows",
                targets.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Invalid(format!("target id {bad} outside vocabulary of {vocab}")));
        }
        let count = weights.iter().filter(|&&w| w).count();
        if count == 0 {
            return Err(Error::Invalid("cross entropy with every position masked out".into()));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(vocab).enumerate() {
            softmax_row(row);
            if weights[r] {
                loss -= row[targets[r]].max(f64::MIN_POSITIVE).ln();
            }
        }
        let out = NdArray::scalar(loss / count as f64);
        let needs = self.needs(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// `Σ wᵢ·termᵢ / Σ wᵢ` over scalar nodes.
    pub fn weighted_mean(&mut self, terms: &[Var], weights: &[f64]) -> Result<Var> {
        if terms.len() != weights.len() || terms.is_empty() {
            return Err(Error::Shape(format!(
                "{} terms with {} weights",
                terms.len(),
                weights.len()
            )));
        }
        let norm: f64 = weights.iter().sum();
        let mut total = 0.0;
        for (t, w) in terms.iter().zip(weights) {
            if self.value(*t).len() != 1 {
                return Err(Error::Shape("weighted mean of a non-scalar".into()));
            }
            total += w * self.value(*t).data()[0];
        }
        let needs = self.needs(terms);
        Ok(self.push(
            NdArray::scalar(total / norm),
            Op::WeightedMean { terms: terms.to_vec(), weights: weights.to_vec() },
            needs,
        ))
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what} of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    /// Gradients of the scalar node `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward from non-scalar node of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<NdArray>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(NdArray::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &NdArray, grads: &mut [Option<NdArray>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.nodes[a.0].needs_grad {
                    let ga = self.grad_slot(grads, *a);
                    gemm(m, n, k, 1.0, gd, false, bv.data(), true, 1.0, ga.data_mut());
                }
                if self.nodes[b.0].needs_grad {
                    let gb = self.grad_slot(grads, *b);
                    gemm(k, m, n, 1.0, av.data(), true, gd, false, 1.0, gb.data_mut());
                }
            }
            Op::AddBias(x, b) => {
                if self.nodes[x.0].needs_grad {
                    self.grad_slot(grads, *x).add_assign(g);
                }
                if self.nodes[b.0].needs_grad {
                    let gb = self.grad_slot(grads, *b);
                    let cols = gb.len();
                    for row in gd.chunks(cols) {
                        for (acc, v) in gb.data_mut().iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.nodes[v.0].needs_grad {
                        self.grad_slot(grads, *v).add_assign(g);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (this, other) in [(a, b), (b, a)] {
                    if self.nodes[this.0].needs_grad {
                        let ov = self.value(*other).data();
                        let slot = self.grad_slot(grads, *this);
                        for ((acc, gv), o) in slot.data_mut().iter_mut().zip(gd).zip(ov) {
                            *acc += gv * o;
                        }
                    }
                }
            }
            Op::Scale(x, f) => {
                let slot = self.grad_slot(grads, *x);
                for (acc, gv) in slot.data_mut().iter_mut().zip(gd) {
                    *acc += gv * f;
                }
            }
            Op::Relu(x) => {
                let out = node.value.data();
                let slot = self.grad_slot(grads, *x);
                for ((acc, gv), o) in slot.data_mut().iter_mut().zip(gd).zip(out) {
                    if *o > 0.0 {
                        *acc += gv;
                    }
                }
            }
            Op::Sum(x) => {
                let slot = self.grad_slot(grads, *x);
                slot.data_mut().iter_mut().for_each(|acc| *acc += gd[0]);
            }
            Op::Reshape(x) => {
                let slot = self.grad_slot(grads, *x);
                for (acc, gv) in slot.data_mut().iter_mut().zip(gd) {
                    *acc += gv;
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let (_, cols) = node.value.as_matrix_dims();
                let slot = self.grad_slot(grads, *x);
                for ((acc, gr), yr) in slot
                    .data_mut()
                    .chunks_mut(cols)
                    .zip(gd.chunks(cols))
                    .zip(y.chunks(cols))
                {
                    let inner = dot(gr, yr);
                    for ((a, gv), yv) in acc.iter_mut().zip(gr).zip(yr) {
                        *a += yv * (gv - inner);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let cols = self.value(*gain).len();
                if self.nodes[gain.0].needs_grad {
                    let slot = self.grad_slot(grads, *gain);
                    for (gr, hr) in gd.chunks(cols).zip(xhat.chunks(cols)) {
                        for ((acc, gv), h) in slot.data_mut().iter_mut().zip(gr).zip(hr) {
                            *acc += gv * h;
                        }
                    }
                }
                if self.nodes[bias.0].needs_grad {
                    let slot = self.grad_slot(grads, *bias);
                    for gr in gd.chunks(cols) {
                        for (acc, gv) in slot.data_mut().iter_mut().zip(gr) {
                            *acc += gv;
                        }
                    }
                }
                if self.nodes[x.0].needs_grad {
                    let gain_v = self.value(*gain).data().to_vec();
                    let slot = self.grad_slot(grads, *x);
                    let n = cols as f64;
                    let mut dh = vec![0.0; cols];
                    for (r, (acc, gr)) in slot
                        .data_mut()
                        .chunks_mut(cols)
                        .zip(gd.chunks(cols))
                        .enumerate()
                    {
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dh[c] = gr[c] * gain_v[c];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / n;
                        let mean_dh_h = dot(&dh, hr) / n;
                        for c in 0..cols {
                            acc[c] += rstd[r] * (dh[c] - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Embedding { table, ids, scale } => {
                let slot = self.grad_slot(grads, *table);
                let (_, cols) = slot.as_matrix_dims();
                for (gr, &id) in gd.chunks(cols).zip(ids) {
                    let dst = &mut slot.data_mut()[id * cols..(id + 1) * cols];
                    for (acc, gv) in dst.iter_mut().zip(gr) {
                        *acc += gv * scale;
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let slot = self.grad_slot(grads, *x);
                for ((acc, gv), m) in slot.data_mut().iter_mut().zip(gd).zip(mask) {
                    *acc += gv * m;
                }
            }
            Op::Attention { q, k, v, layout, probs } => {
                self.attention_backward(*q, *k, *v, layout, probs, gd, grads);
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let (_, vocab) = self.value(*logits).as_matrix_dims();
                let count = weights.iter().filter(|&&w| w).count() as f64;
                let coef = gd[0] / count;
                let slot = self.grad_slot(grads, *logits);
                for (r, (acc, pr)) in slot
                    .data_mut()
                    .chunks_mut(vocab)
                    .zip(probs.chunks(vocab))
                    .enumerate()
                {
                    if !weights[r] {
                        continue;
                    }
                    for (a, p) in acc.iter_mut().zip(pr) {
                        *a += coef * p;
                    }
                    acc[targets[r]] -= coef;
                }
            }
            Op::WeightedMean { terms, weights } => {
                let norm: f64 = weights.iter().sum();
                for (t, w) in terms.iter().zip(weights) {
                    if self.nodes[t.0].needs_grad {
                        self.grad_slot(grads, *t).data_mut()[0] += gd[0] * w / norm;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttnLayout,
        probs: &[f64],
        gd: &[f64],
        grads: &mut [Option<NdArray>],
    ) {
        let (_, d) = self.value(q).as_matrix_dims();
        let heads = layout.heads;
        let dh = d / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![0.0; qd.len()];
        let mut gk = vec![0.0; kd.len()];
        let mut gv = vec![0.0; vd.len()];
        let mut dp = Vec::new();
        let mut cursor = 0;
        for b in &layout.blocks {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..b.q_len {
                    let p = &probs[cursor..cursor + b.k_len];
                    cursor += b.k_len;
                    let go = &gd[(b.q_start + i) * d + off..][..dh];
                    dp.clear();
                    let mut inner = 0.0;
                    for (j, &pj) in p.iter().enumerate() {
                        if pj == 0.0 {
                            dp.push(0.0);
                            continue;
                        }
                        let row = (b.k_start + j) * d + off;
                        let dpj = dot(go, &vd[row..row + dh]);
                        for (acc, g) in gv[row..row + dh].iter_mut().zip(go) {
                            *acc += pj * g;
                        }
                        inner += pj * dpj;
                        dp.push(dpj);
                    }
                    let qrow = (b.q_start + i) * d + off;
                    for (j, &pj) in p.iter().enumerate() {
                        if pj == 0.0 {
                            continue;
                        }
                        let ds = pj * (dp[j] - inner) * inv_sqrt;
                        let krow = (b.k_start + j) * d + off;
                        for c in 0..dh {
                            gq[qrow + c] += ds * kd[krow + c];
                            gk[krow + c] += ds * qd[qrow + c];
                        }
                    }
                }
            }
        }
        for (var, g) in [(q, gq), (k, gk), (v, gv)] {
            if self.nodes[var.0].needs_grad {
                let slot = self.grad_slot(grads, var);
                for (acc, x) in slot.data_mut().iter_mut().zip(&g) {
                    *acc += x;
                }
            }
        }
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<NdArray>], var: Var) -> &'g mut NdArray {
        grads[var.0].get_or_insert_with(|| NdArray::zeros(self.value(var).shape()))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
