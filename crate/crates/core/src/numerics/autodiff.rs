//! Reverse-mode differentiation over a linear tape of matrix operations.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards
//! from the loss is a reverse topological traversal. Only leaves registered
//! through [`Tape::param`] receive gradients; constants are never
//! differentiated and subgraphs that depend on no parameter are skipped.

use std::collections::BTreeMap;

use crate::error::{PktError, Result};

use super::ops::{gemm, softmax_in_place, Trans};
use super::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Token segments `(start_row, len)` sharing one causal attention window.
pub type Segments = Vec<(usize, usize)>;

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: Trans, tb: Trans },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulRow { x: Var, gain: Var },
    RmsNorm { x: Var, inv_rms: Vec<T> },
    Gelu(Var),
    Relu(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, segments: Segments, probs: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor<T> },
    Sum(Var),
    MeanSquare(Var),
    ScatterRows { base: Var, idx: Vec<usize>, rows: Var },
    ScatterCols { base: Var, idx: Vec<usize>, cols: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Named parameter gradients produced by [`Tape::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients<T = f32> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.map
    }
}

pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

pub fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Registers a named trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.into(), v));
        v
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.gemm(a, Trans::No, b, Trans::No)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.gemm(a, Trans::No, b, Trans::Yes)
    }

    pub fn gemm(&mut self, a: Var, ta: Trans, b: Var, tb: Trans) -> Result<Var> {
        let value = gemm(self.value(a), ta, self.value(b), tb)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, ng))
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

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// Multiplies every row of `x` elementwise by the vector `gain`.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        let xv = self.value(x);
        let g = self.value(gain);
        if xv.rank() != 2 || g.len() != xv.cols() {
            return Err(PktError::shape("mul_row", format!("{:?} by gain {:?}", xv.shape(), g.shape())));
        }
        let c = xv.cols();
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= g.data()[i % c];
        }
        let ng = self.ng(x) || self.ng(gain);
        Ok(self.push(out, Op::MulRow { x, gain }, ng))
    }

    /// Row-wise `x / sqrt(mean(x²) + eps)`.
    pub fn rms_norm(&mut self, x: Var, eps: T) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = xv.clone();
        let mut inv = Vec::with_capacity(r);
        for i in 0..r {
            let row = out.row_mut(i);
            let ms = row.iter().map(|&v| v * v).sum::<T>() / T::of(c as f64);
            let s = T::one() / (ms + eps).sqrt();
            row.iter_mut().for_each(|v| *v *= s);
            inv.push(s);
        }
        let ng = self.ng(x);
        self.push(out, Op::RmsNorm { x, inv_rms: inv }, ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        let ng = self.ng(x);
        self.push(value, Op::Gelu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let ng = self.ng(x);
        self.push(value, Op::Relu(x), ng)
    }

    /// Causal multi-head attention mixing: returns the concatenated head
    /// outputs `z` (before the output projection).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: Segments) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.rank() != 2 {
            return Err(PktError::shape(
                "attention",
                format!("q {:?} k {:?} v {:?}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        let (rows, d) = (qv.rows(), qv.cols());
        if heads == 0 || d % heads != 0 {
            return Err(PktError::shape("attention", format!("width {d} not divisible by {heads} heads")));
        }
        if segments.iter().map(|s| s.1).sum::<usize>() != rows {
            return Err(PktError::shape("attention", "segments do not cover all rows"));
        }
        let (z, probs) = attention_forward(qv, kv, vv, heads, &segments);
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(z, Op::Attention { q, k, v, heads, segments, probs }, ng))
    }

    pub fn gather_rows(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(PktError::Index(format!("gather row {bad} of {}", t.rows())));
        }
        let value = t.select_rows(&ids);
        let ng = self.ng(table);
        Ok(self.push(value, Op::Gather { table, ids }, ng))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.rows() != targets.len() || targets.is_empty() {
            return Err(PktError::shape(
                "cross_entropy",
                format!("logits {:?} with {} targets", lv.shape(), targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= lv.cols()) {
            return Err(PktError::Index(format!("target {bad} of {}", lv.cols())));
        }
        let mut probs = lv.clone();
        let mut loss = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = probs.row_mut(i);
            let lse = super::ops::logsumexp(row);
            loss += lse - row[t];
            softmax_in_place(row);
        }
        let n = T::of(targets.len() as f64);
        let ng = self.ng(logits);
        Ok(self.push(Tensor::scalar(loss / n), Op::CrossEntropy { logits, targets, probs }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(value, Op::Sum(x), ng)
    }

    pub fn mean_square(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.dot(xv) / T::of(xv.len() as f64));
        let ng = self.ng(x);
        self.push(value, Op::MeanSquare(x), ng)
    }

    /// `base` with `rows[i]` added to row `idx[i]`.
    pub fn scatter_rows(&mut self, base: Var, idx: Vec<usize>, rows: Var) -> Result<Var> {
        let (b, r) = (self.value(base), self.value(rows));
        if b.rank() != 2 || r.rank() != 2 || r.cols() != b.cols() || r.rows() != idx.len() {
            return Err(PktError::shape(
                "scatter_rows",
                format!("base {:?}, rows {:?}, {} slots", b.shape(), r.shape(), idx.len()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= b.rows()) {
            return Err(PktError::Index(format!("scatter row {bad} of {}", b.rows())));
        }
        let mut out = b.clone();
        for (i, &slot) in idx.iter().enumerate() {
            for (o, &v) in out.row_mut(slot).iter_mut().zip(r.row(i)) {
                *o += v;
            }
        }
        let ng = self.ng(base) || self.ng(rows);
        Ok(self.push(out, Op::ScatterRows { base, idx, rows }, ng))
    }

    /// `base` with `cols[i]` (a row of `cols`) added to column `idx[i]`.
    pub fn scatter_cols(&mut self, base: Var, idx: Vec<usize>, cols: Var) -> Result<Var> {
        let (b, c) = (self.value(base), self.value(cols));
        if b.rank() != 2 || c.rank() != 2 || c.cols() != b.rows() || c.rows() != idx.len() {
            return Err(PktError::shape(
                "scatter_cols",
                format!("base {:?}, cols {:?}, {} slots", b.shape(), c.shape(), idx.len()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= b.cols()) {
            return Err(PktError::Index(format!("scatter column {bad} of {}", b.cols())));
        }
        let mut out = b.clone();
        let width = out.cols();
        for (i, &slot) in idx.iter().enumerate() {
            for (r, &v) in c.row(i).iter().enumerate() {
                out.data_mut()[r * width + slot] += v;
            }
        }
        let ng = self.ng(base) || self.ng(cols);
        Ok(self.push(out, Op::ScatterCols { base, idx, cols }, ng))
    }

    /// Gradients of the scalar `loss` for every registered parameter that
    /// it depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(PktError::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }

        let mut map = BTreeMap::new();
        for (name, v) in &self.params {
            if v.0 <= loss.0 {
                if let Some(g) = grads[v.0].take() {
                    map.insert(name.clone(), g);
                }
            }
        }
        Ok(Gradients { map })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.ng(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let da = match ta {
                        Trans::No => gemm(g, Trans::No, bv, flip(*tb))?,
                        Trans::Yes => gemm(bv, *tb, g, Trans::Yes)?,
                    };
                    self.accumulate(grads, *a, da)?;
                }
                if self.ng(*b) {
                    let db = match tb {
                        Trans::No => gemm(av, flip(*ta), g, Trans::No)?,
                        Trans::Yes => gemm(g, Trans::Yes, av, *ta)?,
                    };
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-T::one()))?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |x, y| x * y)?)?;
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, g.zip_map(av, |x, y| x * y)?)?;
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s))?,
            Op::MulRow { x, gain } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let c = xv.cols();
                if self.ng(*x) {
                    let mut dx = g.clone();
                    for (i, v) in dx.data_mut().iter_mut().enumerate() {
                        *v *= gv.data()[i % c];
                    }
                    self.accumulate(grads, *x, dx)?;
                }
                if self.ng(*gain) {
                    let mut dg = vec![T::zero(); c];
                    for (i, (&gi, &xi)) in g.data().iter().zip(xv.data()).enumerate() {
                        dg[i % c] += gi * xi;
                    }
                    let dg = Tensor::new(gv.shape().to_vec(), dg)?;
                    self.accumulate(grads, *gain, dg)?;
                }
            }
            Op::RmsNorm { x, inv_rms } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                for (i, &s) in inv_rms.iter().enumerate() {
                    let (xr, gr) = (xv.row(i), g.row(i));
                    let dot: T = xr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    let coef = s * s * s * dot / T::of(c as f64);
                    for ((d, &xi), &gi) in dx.row_mut(i).iter_mut().zip(xr).zip(gr) {
                        *d = s * gi - coef * xi;
                    }
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::Gelu(x) => {
                let dx = self.value(*x).zip_map(g, |xi, gi| gelu_grad(xi) * gi)?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::Relu(x) => {
                let dx = self.value(*x).zip_map(g, |xi, gi| if xi > T::zero() { gi } else { T::zero() })?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::Attention { q, k, v, heads, segments, probs } => {
                let (dq, dk, dv) =
                    attention_backward(self.value(*q), self.value(*k), self.value(*v), *heads, segments, probs, g);
                self.accumulate(grads, *q, dq)?;
                self.accumulate(grads, *k, dk)?;
                self.accumulate(grads, *v, dv)?;
            }
            Op::Gather { table, ids } => {
                let mut dt = Tensor::zeros(self.value(*table).shape());
                for (i, &id) in ids.iter().enumerate() {
                    for (d, &gi) in dt.row_mut(id).iter_mut().zip(g.row(i)) {
                        *d += gi;
                    }
                }
                self.accumulate(grads, *table, dt)?;
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let scale = g.item() / T::of(targets.len() as f64);
                let mut dl = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    let row = dl.row_mut(i);
                    row[t] -= T::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                self.accumulate(grads, *logits, dl)?;
            }
            Op::Sum(x) => {
                let dx = Tensor::full(self.value(*x).shape(), g.item());
                self.accumulate(grads, *x, dx)?;
            }
            Op::MeanSquare(x) => {
                let xv = self.value(*x);
                let s = T::of(2.0) * g.item() / T::of(xv.len() as f64);
                self.accumulate(grads, *x, xv.scale(s))?;
            }
            Op::ScatterRows { base, idx, rows } => {
                self.accumulate(grads, *base, g.clone())?;
                if self.ng(*rows) {
                    self.accumulate(grads, *rows, g.select_rows(idx))?;
                }
            }
            Op::ScatterCols { base, idx, cols } => {
                self.accumulate(grads, *base, g.clone())?;
                if self.ng(*cols) {
                    let dc = Tensor::from_fn(idx.len(), g.rows(), |i, r| g.get(r, idx[i]));
                    self.accumulate(grads, *cols, dc)?;
                }
            }
        }
        Ok(())
    }
}

fn flip(t: Trans) -> Trans {
    match t {
        Trans::No => Trans::Yes,
        Trans::Yes => Trans::No,
    }
}

/// Returns `z` and the attention probabilities, laid out per segment and
/// head as dense `len × len` blocks (zero above the diagonal).
pub(crate) fn attention_forward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    segments: &[(usize, usize)],
) -> (Tensor<T>, Vec<T>) {
    let d = q.cols();
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut z = Tensor::zeros(q.shape());
    let mut probs = Vec::with_capacity(segments.iter().map(|s| s.1 * s.1 * heads).sum());
    let mut scores = Vec::new();
    for &(start, len) in segments {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..len {
                let qi = &q.row(start + i)[cols.clone()];
                scores.clear();
                for n in 0..=i {
                    let kn = &k.row(start + n)[cols.clone()];
                    scores.push(qi.iter().zip(kn).map(|(&a, &b)| a * b).sum::<T>() * scale);
                }
                softmax_in_place(&mut scores);
                let zi = &mut z.row_mut(start + i)[cols.clone()];
                for (n, &p) in scores.iter().enumerate() {
                    let vn = &v.row(start + n)[cols.clone()];
                    for (o, &x) in zi.iter_mut().zip(vn) {
                        *o += p * x;
                    }
                }
                probs.extend_from_slice(&scores);
                probs.extend(std::iter::repeat_n(T::zero(), len - 1 - i));
            }
        }
    }
    (z, probs)
}

fn attention_backward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    segments: &[(usize, usize)],
    probs: &[T],
    dz: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = q.cols();
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let mut offset = 0;
    let mut dalpha = Vec::new();
    for &(start, len) in segments {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..len {
                let p = &probs[offset + i * len..offset + i * len + i + 1];
                let dzi = &dz.row(start + i)[cols.clone()];
                dalpha.clear();
                for (n, &pn) in p.iter().enumerate() {
                    let vn = &v.row(start + n)[cols.clone()];
                    dalpha.push(dzi.iter().zip(vn).map(|(&a, &b)| a * b).sum::<T>());
                    for (o, &gz) in dv.row_mut(start + n)[cols.clone()].iter_mut().zip(dzi) {
                        *o += pn * gz;
                    }
                }
                let mean: T = p.iter().zip(&dalpha).map(|(&a, &b)| a * b).sum();
                let qi: Vec<T> = q.row(start + i)[cols.clone()].to_vec();
                for (n, &pn) in p.iter().enumerate() {
                    let ds = pn * (dalpha[n] - mean) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kn: Vec<T> = k.row(start + n)[cols.clone()].to_vec();
                    for (o, &x) in dq.row_mut(start + i)[cols.clone()].iter_mut().zip(&kn) {
                        *o += ds * x;
                    }
                    for (o, &x) in dk.row_mut(start + n)[cols.clone()].iter_mut().zip(&qi) {
                        *o += ds * x;
                    }
                }
            }
            offset += len * len;
        }
    }
    (dq, dk, dv)
}
