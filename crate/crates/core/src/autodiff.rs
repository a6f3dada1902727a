//! Tensor-level reverse-mode automatic differentiation.
//!
//! A [`Tape`] records matrix-valued operations as they execute. Every value
//! is a row-major `rows × cols` matrix; vectors are `1 × n`. Leaves are either
//! parameters (gradient tracked) or constants (no gradient); parameter and
//! constant leaves borrow their storage, so wrapping a large parameter set
//! costs nothing. [`Tape::backward`] walks the record in reverse and returns
//! the gradient of a scalar node with respect to every parameter leaf.
//!
//! Nodes whose inputs are all constants are themselves constants, which is
//! how stop-gradient falls out: anything computed only from constants never
//! receives a gradient.

use alloc::borrow::Cow;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Real, Result, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-6;

enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(T, T)> },
    Gelu(Var),
    Attention { qkv: Var, heads: usize, probs: Vec<T> },
    Gather { x: Var, rows: Vec<usize> },
    Concat(Var, Var),
    Repeat(Var),
    SumSquares(Var),
    Mean(Var),
    MeanRows(Var),
}

struct Node<'a, T: Real> {
    value: Cow<'a, [T]>,
    rows: usize,
    cols: usize,
    op: Op<T>,
    needs_grad: bool,
}

/// Operation record for one forward pass.
pub struct Tape<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::ZERO; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::ZERO;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

const SQRT_2: f64 = core::f64::consts::SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf) GELU.
pub fn gelu<T: Real>(x: T) -> T {
    T::from_f64(0.5) * x * (T::ONE + (x / T::from_f64(SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::from_f64(0.5) * (T::ONE + (x / T::from_f64(SQRT_2)).erf());
    let pdf = T::from_f64(FRAC_1_SQRT_2PI) * (-(x * x) * T::from_f64(0.5)).exp();
    cdf + x * pdf
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [T]>, rows: usize, cols: usize, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Vec<T>, rows: usize, cols: usize, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), rows, cols, op, needs_grad)
    }

    /// Trainable leaf borrowing `tensor`.
    pub fn param(&mut self, tensor: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(tensor.data()), tensor.rows(), tensor.cols(), Op::Leaf, true)
    }

    /// Constant leaf borrowing `tensor`.
    pub fn constant(&mut self, tensor: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(tensor.data()), tensor.rows(), tensor.cols(), Op::Leaf, false)
    }

    /// Constant leaf owning `values`, viewed as `rows × cols`.
    pub fn constant_owned(&mut self, rows: usize, cols: usize, values: Vec<T>) -> Result<Var> {
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values cannot form a {rows} x {cols} matrix",
                values.len()
            )));
        }
        Ok(self.push(Cow::Owned(values), rows, cols, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Copy of a node's value as a `rows × cols` tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let (r, c) = self.shape(v);
        Tensor::from_vec(&[r, c], self.value(v).to_vec()).expect("node shape is consistent")
    }

    /// Softmax maps of an attention node, laid out `[heads][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<(&[T], usize)> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, heads, .. } => Some((probs, *heads)),
            _ => None,
        }
    }

    fn mismatch(what: &str, a: (usize, usize), b: (usize, usize)) -> Error {
        Error::ShapeMismatch(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
    }

    /// `x · w + b` with `x: n × in`, `w: in × out`, `b: 1 × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, d_in) = self.shape(x);
        let (w_in, d_out) = self.shape(w);
        if w_in != d_in {
            return Err(Self::mismatch("linear input vs weight", (n, d_in), (w_in, d_out)));
        }
        if let Some(b) = b {
            if self.shape(b) != (1, d_out) {
                return Err(Self::mismatch("linear bias", self.shape(b), (1, d_out)));
            }
        }
        let mut y = vec![T::ZERO; n * d_out];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            for i in 0..n {
                let yi = &mut y[i * d_out..(i + 1) * d_out];
                if let Some(b) = b {
                    yi.copy_from_slice(self.value(b));
                }
                for k in 0..d_in {
                    axpy(xv[i * d_in + k], &wv[k * d_out..(k + 1) * d_out], yi);
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.derived(y, n, d_out, Op::Linear { x, w, b }, &inputs))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::mismatch(what, self.shape(a), self.shape(b)));
        }
        Ok(self.shape(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, "add")?;
        let y = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| p + q).collect();
        Ok(self.derived(y, r, c, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, "sub")?;
        let y = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| p - q).collect();
        Ok(self.derived(y, r, c, Op::Sub(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let (r, c) = self.shape(x);
        let y = self.value(x).iter().map(|&v| v * factor).collect();
        self.derived(y, r, c, Op::Scale(x, factor), &[x])
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 × cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, d) = self.shape(x);
        if self.shape(gamma) != (1, d) || self.shape(beta) != (1, d) {
            return Err(Self::mismatch("layer norm affine", self.shape(gamma), (1, d)));
        }
        let eps = T::from_f64(LN_EPS);
        let inv_d = T::ONE / T::from_usize(d);
        let mut y = vec![T::ZERO; n * d];
        let mut stats = Vec::with_capacity(n);
        {
            let xv = self.value(x);
            let g = self.value(gamma);
            let b = self.value(beta);
            for i in 0..n {
                let row = &xv[i * d..(i + 1) * d];
                let mean = row.iter().copied().sum::<T>() * inv_d;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                let rstd = T::ONE / (var + eps).sqrt();
                for j in 0..d {
                    y[i * d + j] = (row[j] - mean) * rstd * g[j] + b[j];
                }
                stats.push((mean, rstd));
            }
        }
        Ok(self.derived(y, n, d, Op::LayerNorm { x, gamma, beta, stats }, &[x, gamma, beta]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let y = self.value(x).iter().map(|&v| gelu(v)).collect();
        self.derived(y, r, c, Op::Gelu(x), &[x])
    }

    /// Multi-head scaled dot-product self-attention over a packed
    /// `n × 3d` QKV matrix (queries, keys, values; heads contiguous within
    /// each). Returns `n × d`.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let (n, d3) = self.shape(qkv);
        if heads == 0 || d3 % (3 * heads) != 0 {
            return Err(Error::ShapeMismatch(format!(
                "qkv width {d3} is not divisible into 3 x {heads} heads"
            )));
        }
        let d = d3 / 3;
        let hd = d / heads;
        let scale = T::ONE / T::from_usize(hd).sqrt();
        let mut probs = vec![T::ZERO; heads * n * n];
        let mut out = vec![T::ZERO; n * d];
        {
            let v = self.value(qkv);
            let mut scores = vec![T::ZERO; n];
            for h in 0..heads {
                let (qo, ko, vo) = (h * hd, d + h * hd, 2 * d + h * hd);
                for i in 0..n {
                    let q = &v[i * d3 + qo..i * d3 + qo + hd];
                    let mut max = T::from_f64(f64::NEG_INFINITY);
                    for j in 0..n {
                        let s = dot(q, &v[j * d3 + ko..j * d3 + ko + hd]) * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let mut total = T::ZERO;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    let p = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
                    let o = &mut out[i * d + h * hd..i * d + (h + 1) * hd];
                    for j in 0..n {
                        p[j] = scores[j] / total;
                        axpy(p[j], &v[j * d3 + vo..j * d3 + vo + hd], o);
                    }
                }
            }
        }
        Ok(self.derived(out, n, d, Op::Attention { qkv, heads, probs }, &[qkv]))
    }

    /// Select rows of `x` in the given order.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, c) = self.shape(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::ShapeMismatch(format!("row {bad} out of range for {n} rows")));
        }
        let xv = self.value(x);
        let mut y = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            y.extend_from_slice(&xv[r * c..(r + 1) * c]);
        }
        Ok(self.derived(y, rows.len(), c, Op::Gather { x, rows: rows.to_vec() }, &[x]))
    }

    /// Stack `a` on top of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ca != cb {
            return Err(Self::mismatch("concat", (ra, ca), (rb, cb)));
        }
        let mut y = self.value(a).to_vec();
        y.extend_from_slice(self.value(b));
        Ok(self.derived(y, ra + rb, ca, Op::Concat(a, b), &[a, b]))
    }

    /// Tile a `1 × c` row `times` times.
    pub fn repeat_row(&mut self, x: Var, times: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r != 1 {
            return Err(Error::ShapeMismatch(format!("repeat expects one row, got {r}")));
        }
        let row = self.value(x);
        let mut y = Vec::with_capacity(times * c);
        for _ in 0..times {
            y.extend_from_slice(row);
        }
        Ok(self.derived(y, times, c, Op::Repeat(x), &[x]))
    }

    /// Sum of squared entries, as a `1 × 1` node.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|&v| v * v).sum::<T>();
        self.derived(vec![s], 1, 1, Op::SumSquares(x), &[x])
    }

    /// Mean of all entries, as a `1 × 1` node.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.iter().copied().sum::<T>() / T::from_usize(xv.len());
        self.derived(vec![s], 1, 1, Op::Mean(x), &[x])
    }

    /// Column means, as a `1 × cols` node.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (n, c) = self.shape(x);
        let xv = self.value(x);
        let mut y = vec![T::ZERO; c];
        for i in 0..n {
            for (acc, &v) in y.iter_mut().zip(&xv[i * c..(i + 1) * c]) {
                *acc += v;
            }
        }
        let inv = T::ONE / T::from_usize(n);
        y.iter_mut().for_each(|v| *v *= inv);
        self.derived(y, 1, c, Op::MeanRows(x), &[x])
    }

    /// Gradients of the `1 × 1` node `loss` with respect to every parameter
    /// leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![T::ONE]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::ZERO; node.rows * node.cols]))
    }

    fn propagate(&self, node: &Node<'a, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (n, c) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let d_in = self.nodes[x.0].cols;
                let xv = self.value(*x);
                let wv = self.value(*w);
                if let Some(dx) = self.slot(grads, *x) {
                    for i in 0..n {
                        let gi = &g[i * c..(i + 1) * c];
                        for k in 0..d_in {
                            dx[i * d_in + k] += dot(gi, &wv[k * c..(k + 1) * c]);
                        }
                    }
                }
                if let Some(dw) = self.slot(grads, *w) {
                    for i in 0..n {
                        let gi = &g[i * c..(i + 1) * c];
                        for k in 0..d_in {
                            axpy(xv[i * d_in + k], gi, &mut dw[k * c..(k + 1) * c]);
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(db) = self.slot(grads, *b) {
                        for i in 0..n {
                            axpy(T::ONE, &g[i * c..(i + 1) * c], db);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(dv) = self.slot(grads, *v) {
                        axpy(T::ONE, g, dv);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    axpy(T::ONE, g, da);
                }
                if let Some(db) = self.slot(grads, *b) {
                    axpy(-T::ONE, g, db);
                }
            }
            Op::Scale(x, factor) => {
                if let Some(dx) = self.slot(grads, *x) {
                    axpy(*factor, g, dx);
                }
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let xv = self.value(*x);
                let gam = self.value(*gamma);
                let inv_d = T::ONE / T::from_usize(c);
                let xhat = |i: usize, j: usize| (xv[i * c + j] - stats[i].0) * stats[i].1;
                if let Some(dg) = self.slot(grads, *gamma) {
                    for i in 0..n {
                        for j in 0..c {
                            dg[j] += g[i * c + j] * xhat(i, j);
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for i in 0..n {
                        axpy(T::ONE, &g[i * c..(i + 1) * c], db);
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let mut dxhat = vec![T::ZERO; c];
                    for i in 0..n {
                        let mut mean_d = T::ZERO;
                        let mut mean_dx = T::ZERO;
                        for j in 0..c {
                            dxhat[j] = g[i * c + j] * gam[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xhat(i, j);
                        }
                        mean_d *= inv_d;
                        mean_dx *= inv_d;
                        let rstd = stats[i].1;
                        for j in 0..c {
                            dx[i * c + j] += rstd * (dxhat[j] - mean_d - xhat(i, j) * mean_dx);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gi * gelu_grad(xi);
                    }
                }
            }
            Op::Attention { qkv, heads, probs } => {
                let Some(dqkv) = self.slot(grads, *qkv) else { return };
                let v = self.value(*qkv);
                let d = c;
                let d3 = 3 * d;
                let hd = d / heads;
                let scale = T::ONE / T::from_usize(hd).sqrt();
                let mut dp = vec![T::ZERO; n];
                for h in 0..*heads {
                    let (qo, ko, vo) = (h * hd, d + h * hd, 2 * d + h * hd);
                    for i in 0..n {
                        let gi = &g[i * d + h * hd..i * d + (h + 1) * hd];
                        let p = &probs[(h * n + i) * n..(h * n + i + 1) * n];
                        let mut weighted = T::ZERO;
                        for j in 0..n {
                            dp[j] = dot(gi, &v[j * d3 + vo..j * d3 + vo + hd]);
                            weighted += dp[j] * p[j];
                            // dV_j += p_ij · dOut_i
                            axpy(p[j], gi, &mut dqkv[j * d3 + vo..j * d3 + vo + hd]);
                        }
                        for j in 0..n {
                            let ds = p[j] * (dp[j] - weighted) * scale;
                            // dQ_i += ds · K_j ; dK_j += ds · Q_i
                            let (qi, kj) = (i * d3 + qo, j * d3 + ko);
                            for t in 0..hd {
                                dqkv[qi + t] += ds * v[kj + t];
                                dqkv[kj + t] += ds * v[qi + t];
                            }
                        }
                    }
                }
            }
            Op::Gather { x, rows } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, &src) in rows.iter().enumerate() {
                        axpy(T::ONE, &g[r * c..(r + 1) * c], &mut dx[src * c..(src + 1) * c]);
                    }
                }
            }
            Op::Concat(a, b) => {
                let split = self.nodes[a.0].rows * c;
                if let Some(da) = self.slot(grads, *a) {
                    axpy(T::ONE, &g[..split], da);
                }
                if let Some(db) = self.slot(grads, *b) {
                    axpy(T::ONE, &g[split..], db);
                }
            }
            Op::Repeat(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for i in 0..n {
                        axpy(T::ONE, &g[i * c..(i + 1) * c], dx);
                    }
                }
            }
            Op::SumSquares(x) => {
                let xv = self.value(*x);
                if let Some(dx) = self.slot(grads, *x) {
                    axpy(T::from_f64(2.0) * g[0], xv, dx);
                }
            }
            Op::Mean(x) => {
                let len = self.nodes[x.0].value.len();
                if let Some(dx) = self.slot(grads, *x) {
                    let share = g[0] / T::from_usize(len);
                    dx.iter_mut().for_each(|v| *v += share);
                }
            }
            Op::MeanRows(x) => {
                let rows = self.nodes[x.0].rows;
                if let Some(dx) = self.slot(grads, *x) {
                    let inv = T::ONE / T::from_usize(rows);
                    for i in 0..rows {
                        axpy(inv, g, &mut dx[i * c..(i + 1) * c]);
                    }
                }
            }
        }
    }
}

/// Result of [`Tape::backward`]: accumulated gradients of parameter leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a parameter leaf; `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a parameter leaf, zeros when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::ZERO; len])
    }
}
