//! Wengert-list reverse-mode differentiation over 2-D values.
//!
//! Every operation appends a node holding its forward value. `backward`
//! replays the list in reverse, accumulating vector-Jacobian products into
//! the inputs. Parameter leaves remember their [`ParamId`] so gradients can
//! be folded back into a [`ParamStore`].

use std::collections::HashMap;

use crate::error::{dim_err, validation_err, Result};

use super::scalar::{gemm, Strides};
use super::{ParamId, ParamStore, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-9;
pub const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    MaxPoolGroups { x: Var, argmax: Vec<usize> },
    Mean(Vec<Var>),
    Reshape(Var),
    Dot { x: Var, w: Vec<T> },
    SoftCe { pred: Var, target: Vec<T> },
    LogitCe { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Bce { logits: Var, targets: Vec<T> },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
}

/// A recording of one forward pass.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("tape nodes are non-empty")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// A constant (or differentiable-but-unowned) input. Vectors become rows.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf)
    }

    pub fn input_matrix(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Result<Var> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return Err(dim_err!("{rows}×{cols} input with {} values", data.len()));
        }
        Ok(self.push(rows, cols, data, Op::Leaf))
    }

    /// Leaf bound to a stored parameter. Repeated calls reuse one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.tensor(id);
        let v = self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Param);
        self.params.insert(id, v);
        v
    }

    /// Parameter leaves recorded on this tape.
    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&id, &v)| (id, v))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(dim_err!("matmul {m}×{k} · {k2}×{n}"));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            Strides::row_major(k),
            self.value(b),
            Strides::row_major(n),
            T::zero(),
            &mut out,
            Strides::row_major(n),
        );
        Ok(self.push(m, n, out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(dim_err!("matmul_bt {m}×{k} · ({n}×{k2})ᵀ"));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            Strides::row_major(k),
            self.value(b),
            Strides::transposed(k),
            T::zero(),
            &mut out,
            Strides::row_major(n),
        );
        Ok(self.push(m, n, out, Op::MatMulBt(a, b)))
    }

    /// `x · w + b` with `w: in × out` and `b: 1 × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.shape(x);
        let (k2, n) = self.shape(w);
        if k != k2 {
            return Err(dim_err!("linear input {m}×{k} against weight {k2}×{n}"));
        }
        let mut out = match b {
            Some(b) => {
                if self.shape(b) != (1, n) {
                    return Err(dim_err!("bias {:?} for output width {n}", self.shape(b)));
                }
                self.value(b).repeat(m)
            }
            None => vec![T::zero(); m * n],
        };
        gemm(
            m,
            k,
            n,
            self.value(x),
            Strides::row_major(k),
            self.value(w),
            Strides::row_major(n),
            T::one(),
            &mut out,
            Strides::row_major(n),
        );
        Ok(self.push(m, n, out, Op::Linear { x, w, b }))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!("add {:?} + {:?}", self.shape(a), self.shape(b)));
        }
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(r, c, out, Op::Add(a, b)))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(dim_err!("add_row {:?} + {:?}", (r, c), self.shape(row)));
        }
        let rv = self.value(row);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(rv).map(|(&x, &y)| x + y))
            .collect();
        Ok(self.push(r, c, out, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x * s).collect();
        self.push(r, c, out, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        self.push(r, c, out, Op::Relu(a))
    }

    /// Row-wise softmax, stabilized by subtracting the row maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.softmax_rows_masked(a, None).expect("unmasked softmax cannot fail")
    }

    /// Row-wise softmax where columns with `valid[j] == false` receive
    /// probability exactly zero.
    pub fn softmax_rows_masked(&mut self, a: Var, valid: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(v) = valid {
            if v.len() != c {
                return Err(dim_err!("softmax mask of length {} for {c} columns", v.len()));
            }
            if !v.iter().any(|&b| b) {
                return Err(validation_err!("softmax mask excludes every column"));
            }
        }
        let keep = |j: usize| valid.is_none_or(|v| v[j]);
        let mut out = vec![T::zero(); r * c];
        for (row, dst) in self.value(a).chunks(c).zip(out.chunks_mut(c)) {
            let max = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| keep(j))
                .map(|(_, &x)| x)
                .fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (j, (&x, d)) in row.iter().zip(dst.iter_mut()).enumerate() {
                if keep(j) {
                    *d = (x - max).exp();
                    sum += *d;
                }
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        Ok(self.push(r, c, out, Op::Softmax(a)))
    }

    /// Normalizes each row to zero mean / unit variance, then applies the
    /// `1 × c` affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(dim_err!("layer_norm affine parameters must be 1×{c}"));
        }
        let n = T::of(c as f64);
        let eps = T::of(LAYER_NORM_EPS);
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        for (i, row) in self.value(x).chunks(c).enumerate() {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for (j, &v) in row.iter().enumerate() {
                xhat[i * c + j] = (v - mean) * rs;
            }
        }
        let g = self.value(gamma);
        let b = self.value(beta);
        let out = xhat.iter().enumerate().map(|(idx, &h)| h * g[idx % c] + b[idx % c]).collect();
        Ok(self.push(r, c, out, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// Gathers rows of `table` by index.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.shape(table);
        if ids.is_empty() {
            return Err(dim_err!("embedding lookup with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(validation_err!("token id {bad} outside vocabulary of {v}"));
        }
        let tv = self.value(table);
        let out = ids.iter().flat_map(|&i| tv[i * d..(i + 1) * d].iter().copied()).collect();
        Ok(self.push(ids.len(), d, out, Op::Embedding { table, ids: ids.to_vec() }))
    }

    // ---- structure ----

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.shape(*parts.first().ok_or_else(|| dim_err!("concat of nothing"))?).0;
        if parts.iter().any(|&p| self.shape(p).0 != r) {
            return Err(dim_err!("concat_cols with differing row counts"));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(r, total, out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.shape(*parts.first().ok_or_else(|| dim_err!("concat of nothing"))?).1;
        if parts.iter().any(|&p| self.shape(p).1 != c) {
            return Err(dim_err!("concat_rows with differing column counts"));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut out = Vec::with_capacity(total * c);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(total, c, out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start >= end || end > r {
            return Err(dim_err!("row slice {start}..{end} of {r} rows"));
        }
        let out = self.value(x)[start * c..end * c].to_vec();
        Ok(self.push(end - start, c, out, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start >= end || end > c {
            return Err(dim_err!("column slice {start}..{end} of {c} columns"));
        }
        let out = self.value(x).chunks(c).flat_map(|row| row[start..end].iter().copied()).collect();
        Ok(self.push(r, end - start, out, Op::SliceCols { x, start }))
    }

    /// Splits the rows of `x` into consecutive groups of `group` rows and
    /// takes the per-column maximum of each group.
    pub fn max_pool_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if group == 0 || r % group != 0 {
            return Err(dim_err!("{r} rows do not split into groups of {group}"));
        }
        let g = r / group;
        let xv = self.value(x);
        let mut out = vec![T::zero(); g * c];
        let mut argmax = vec![0usize; g * c];
        for gi in 0..g {
            for j in 0..c {
                let mut best = gi * group * c + j;
                for i in 1..group {
                    let idx = (gi * group + i) * c + j;
                    if xv[idx] > xv[best] {
                        best = idx;
                    }
                }
                out[gi * c + j] = xv[best];
                argmax[gi * c + j] = best;
            }
        }
        Ok(self.push(g, c, out, Op::MaxPoolGroups { x, argmax }))
    }

    /// Per-channel maximum over a whole set: `N × D → 1 × D`.
    pub fn max_pool_over_set(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).0;
        self.max_pool_groups(x, r)
    }

    /// Elementwise mean of same-shaped values.
    pub fn mean_of(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| dim_err!("mean of nothing"))?;
        let (r, c) = self.shape(first);
        if parts.iter().any(|&p| self.shape(p) != (r, c)) {
            return Err(dim_err!("mean_of with differing shapes"));
        }
        let mut out = vec![T::zero(); r * c];
        for &p in parts {
            for (o, &v) in out.iter_mut().zip(self.value(p)) {
                *o += v;
            }
        }
        let inv = T::one() / T::of(parts.len() as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(r, c, out, Op::Mean(parts.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r * c != rows * cols {
            return Err(dim_err!("reshape {r}×{c} to {rows}×{cols}"));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(rows, cols, out, Op::Reshape(x)))
    }

    /// `Σ x ⊙ w` for a constant weight buffer.
    pub fn dot_const(&mut self, x: Var, w: &[T]) -> Result<Var> {
        if w.len() != self.value(x).len() {
            return Err(dim_err!("dot with {} weights for {} values", w.len(), self.value(x).len()));
        }
        let s = self.value(x).iter().zip(w).map(|(&a, &b)| a * b).sum();
        Ok(self.push(1, 1, vec![s], Op::Dot { x, w: w.to_vec() }))
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        if terms.iter().any(|&(v, _)| self.shape(v) != (1, 1)) {
            return Err(dim_err!("weighted_sum expects scalar terms"));
        }
        let s = terms.iter().map(|&(v, w)| self.scalar(v) * w).sum();
        Ok(self.push(1, 1, vec![s], Op::WeightedSum(terms.to_vec())))
    }

    // ---- losses ----

    /// Mean over rows of `−Σ target · ln(max(pred, 1e-9))`.
    ///
    /// Every target row must sum to one within `1e-6`.
    pub fn cross_entropy_soft(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let (r, c) = self.shape(pred);
        if (target.rows(), target.cols()) != (r, c) {
            return Err(dim_err!("soft CE target {:?} vs prediction {r}×{c}", target.shape()));
        }
        for i in 0..r {
            let s: f64 = target.row(i).iter().map(|x| x.as_f64()).sum();
            if (s - 1.0).abs() > 1e-6 || target.row(i).iter().any(|&x| x < T::zero()) {
                return Err(validation_err!("soft CE target row {i} is not a distribution (sum {s})"));
            }
        }
        let floor = T::of(PROB_FLOOR);
        let mut loss = T::zero();
        for (&p, &t) in self.value(pred).iter().zip(target.data()) {
            if t != T::zero() {
                loss -= t * p.max(floor).ln();
            }
        }
        loss /= T::of(r as f64);
        Ok(self.push(1, 1, vec![loss], Op::SoftCe { pred, target: target.data().to_vec() }))
    }

    /// Mean over rows of `−ln softmax(logits)[target]`.
    pub fn cross_entropy_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if targets.len() != r {
            return Err(dim_err!("{} targets for {r} rows", targets.len()));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(validation_err!("class target {t} outside {c} classes"));
        }
        let mut probs = vec![T::zero(); r * c];
        let mut loss = T::zero();
        for (i, row) in self.value(logits).chunks(c).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[targets[i]];
            for (j, &z) in row.iter().enumerate() {
                probs[i * c + j] = (z - lse).exp();
            }
        }
        loss /= T::of(r as f64);
        Ok(self.push(1, 1, vec![loss], Op::LogitCe { logits, targets: targets.to_vec(), probs }))
    }

    /// Mean binary cross-entropy on logits against `{0,1}` (or soft) targets.
    pub fn bce_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        if targets.len() != self.value(logits).len() {
            return Err(dim_err!("{} BCE targets for {} logits", targets.len(), self.value(logits).len()));
        }
        let n = T::of(targets.len() as f64);
        let loss = self
            .value(logits)
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<T>()
            / n;
        Ok(self.push(1, 1, vec![loss], Op::Bce { logits, targets: targets.to_vec() }))
    }

    // ---- reverse pass ----

    /// Back-propagates from a scalar node with seed 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss) != (1, 1) {
            return Err(dim_err!("backward from non-scalar {:?}", self.shape(loss)));
        }
        self.backward_seeded(loss, &[T::one()])
    }

    /// Back-propagates an arbitrary output cotangent.
    pub fn backward_seeded(&self, out: Var, seed: &[T]) -> Result<Gradients<T>> {
        if seed.len() != self.value(out).len() {
            return Err(dim_err!("seed of length {} for output of {}", seed.len(), self.value(out).len()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed.to_vec());
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = cols;
                // dA += G·Bᵀ
                let bv = self.value(*b);
                acc(grads, *a, m * k, |da| {
                    gemm(m, n, k, g, Strides::row_major(n), bv, Strides::transposed(n), T::one(), da, Strides::row_major(k))
                });
                // dB += Aᵀ·G
                let av = self.value(*a);
                acc(grads, *b, k * n, |db| {
                    gemm(k, m, n, av, Strides::transposed(k), g, Strides::row_major(n), T::one(), db, Strides::row_major(n))
                });
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = self.shape(*a);
                let n = cols;
                // C = A·Bᵀ: dA += G·B, dB += Gᵀ·A
                let bv = self.value(*b);
                acc(grads, *a, m * k, |da| {
                    gemm(m, n, k, g, Strides::row_major(n), bv, Strides::row_major(k), T::one(), da, Strides::row_major(k))
                });
                let av = self.value(*a);
                acc(grads, *b, n * k, |db| {
                    gemm(n, m, k, g, Strides::transposed(n), av, Strides::row_major(k), T::one(), db, Strides::row_major(k))
                });
            }
            Op::Linear { x, w, b } => {
                let (m, k) = self.shape(*x);
                let n = cols;
                let wv = self.value(*w);
                acc(grads, *x, m * k, |dx| {
                    gemm(m, n, k, g, Strides::row_major(n), wv, Strides::transposed(n), T::one(), dx, Strides::row_major(k))
                });
                let xv = self.value(*x);
                acc(grads, *w, k * n, |dw| {
                    gemm(k, m, n, xv, Strides::transposed(k), g, Strides::row_major(n), T::one(), dw, Strides::row_major(n))
                });
                if let Some(b) = b {
                    acc(grads, *b, n, |db| col_sum_into(g, n, db));
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.len(), |d| add_into(d, g));
                acc(grads, *b, g.len(), |d| add_into(d, g));
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, g.len(), |d| add_into(d, g));
                acc(grads, *row, cols, |d| col_sum_into(g, cols, d));
            }
            Op::Scale(a, s) => {
                acc(grads, *a, g.len(), |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *s));
            }
            Op::Relu(a) => {
                let y = &node.value;
                acc(grads, *a, g.len(), |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                        if y > T::zero() {
                            *d += g;
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &node.value;
                acc(grads, *a, g.len(), |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                        for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (g - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = self.value(*gamma);
                let n = T::of(cols as f64);
                acc(grads, *x, g.len(), |dx| {
                    let mut dxhat = vec![T::zero(); cols];
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..cols {
                            dxhat[j] = gr[j] * gv[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * hr[j];
                        }
                        let scale = rstd[r] / n;
                        for j in 0..cols {
                            dx[r * cols + j] += scale * (n * dxhat[j] - s1 - hr[j] * s2);
                        }
                    }
                });
                acc(grads, *gamma, cols, |dg| {
                    for (i, (&g, &h)) in g.iter().zip(xhat).enumerate() {
                        dg[i % cols] += g * h;
                    }
                });
                acc(grads, *beta, cols, |db| col_sum_into(g, cols, db));
            }
            Op::Embedding { table, ids } => {
                let len = self.value(*table).len();
                acc(grads, *table, len, |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.shape(p);
                    acc(grads, p, pr * pc, |d| {
                        for r in 0..pr {
                            add_into(&mut d[r * pc..(r + 1) * pc], &g[r * cols + offset..r * cols + offset + pc]);
                        }
                    });
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(grads, p, len, |d| add_into(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let len = self.value(*x).len();
                acc(grads, *x, len, |d| add_into(&mut d[start * cols..start * cols + g.len()], g));
            }
            Op::SliceCols { x, start } => {
                let (xr, xc) = self.shape(*x);
                acc(grads, *x, xr * xc, |d| {
                    for r in 0..xr {
                        add_into(&mut d[r * xc + start..r * xc + start + cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::MaxPoolGroups { x, argmax } => {
                let len = self.value(*x).len();
                acc(grads, *x, len, |d| {
                    for (&src, &g) in argmax.iter().zip(g) {
                        d[src] += g;
                    }
                });
            }
            Op::Mean(parts) => {
                let inv = T::one() / T::of(parts.len() as f64);
                for &p in parts {
                    acc(grads, p, g.len(), |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * inv));
                }
            }
            Op::Reshape(x) => acc(grads, *x, g.len(), |d| add_into(d, g)),
            Op::Dot { x, w } => {
                acc(grads, *x, w.len(), |d| d.iter_mut().zip(w).for_each(|(d, &w)| *d += g[0] * w));
            }
            Op::SoftCe { pred, target } => {
                let (r, _) = self.shape(*pred);
                let floor = T::of(PROB_FLOOR);
                let scale = g[0] / T::of(r as f64);
                let pv = self.value(*pred);
                acc(grads, *pred, pv.len(), |d| {
                    for ((d, &p), &t) in d.iter_mut().zip(pv).zip(target) {
                        if t != T::zero() && p > floor {
                            *d -= scale * t / p;
                        }
                    }
                });
            }
            Op::LogitCe { logits, targets, probs } => {
                let (r, c) = self.shape(*logits);
                let scale = g[0] / T::of(r as f64);
                acc(grads, *logits, r * c, |d| {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            d[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                });
            }
            Op::Bce { logits, targets } => {
                let zv = self.value(*logits);
                let scale = g[0] / T::of(targets.len() as f64);
                acc(grads, *logits, zv.len(), |d| {
                    for ((d, &z), &t) in d.iter_mut().zip(zv).zip(targets) {
                        let sig = T::one() / (T::one() + (-z).exp());
                        *d += scale * (sig - t);
                    }
                });
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    acc(grads, v, 1, |d| d[0] += g[0] * w);
                }
            }
        }
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize, f: impl FnOnce(&mut [T])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
    f(slot);
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn col_sum_into<T: Scalar>(g: &[T], cols: usize, dst: &mut [T]) {
    for row in g.chunks(cols) {
        add_into(dst, row);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::<f32>::new();
        let x = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let i = tape.input(&Tensor::identity(2));
        let xv = tape.input(&x);
        let y = tape.matmul(i, xv).unwrap();
        assert_eq!(tape.value(y), x.data());

        let a = tape.input(&Tensor::from_rows(&[vec![1., 2.], vec![3., 4.]]).unwrap());
        let b = tape.input(&Tensor::from_rows(&[vec![1.], vec![1.]]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), (2, 1));
        assert_eq!(tape.value(c), &[3., 7.]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut tape = Tape::<f32>::new();
        let a = tape.input(&Tensor::zeros(vec![2, 3]));
        let b = tape.input(&Tensor::zeros(vec![2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn softmax_uniform_and_stabilized() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(&Tensor::from_rows(&[vec![0., 0., 0.], vec![1000., 0., -1000.]]).unwrap());
        let y = tape.softmax_rows(x);
        let v = tape.value(y);
        for &p in &v[..3] {
            assert!(close(p as f64, 1.0 / 3.0, 1e-6));
        }
        assert!(close(v[3] as f64, 1.0, 1e-6));
        assert!(v[4] >= 0.0 && v[4] < 1e-30);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn masked_softmax_zeroes_masked_columns() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(&Tensor::from_rows(&[vec![5., 1., 1.]]).unwrap());
        let y = tape.softmax_rows_masked(x, Some(&[false, true, true])).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.5, 0.5]);
        assert!(tape.softmax_rows_masked(x, Some(&[false, false, false])).is_err());
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(&Tensor::from_rows(&[vec![3.0; 4]]).unwrap());
        let g = tape.input(&Tensor::from_rows(&[vec![1.0; 4]]).unwrap());
        let b = tape.input(&Tensor::zeros(vec![1, 4]));
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn max_pool_single_element_is_identity() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(&Tensor::from_rows(&[vec![0.5, -2.0, 7.0]]).unwrap());
        let y = tape.max_pool_over_set(x).unwrap();
        assert_eq!(tape.value(y), &[0.5, -2.0, 7.0]);
    }

    #[test]
    fn soft_cross_entropy_cases() {
        let mut tape = Tape::<f64>::new();
        let onehot = Tensor::from_rows(&[vec![0., 1., 0.]]).unwrap();
        let p = tape.input(&onehot);
        let l = tape.cross_entropy_soft(p, &onehot).unwrap();
        assert_eq!(tape.scalar(l), 0.0);

        let uniform = tape.input(&Tensor::from_rows(&[vec![0.2; 5]]).unwrap());
        let t = Tensor::from_rows(&[vec![0., 0., 1., 0., 0.]]).unwrap();
        let l = tape.cross_entropy_soft(uniform, &t).unwrap();
        assert!(close(tape.scalar(l), 5f64.ln(), 1e-12));

        let bad = Tensor::from_rows(&[vec![0.5, 0.0, 0.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(tape.cross_entropy_soft(uniform, &bad), Err(crate::Error::Validation(_))));
    }

    #[test]
    fn soft_cross_entropy_clamps_zero_probability() {
        let mut tape = Tape::<f32>::new();
        let p = tape.input(&Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let t = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let l = tape.cross_entropy_soft(p, &t).unwrap();
        assert!(close(tape.scalar(l) as f64, -(1e-9f64).ln(), 1e-3));
        let g = tape.backward(l).unwrap();
        assert!(g.get(p).unwrap().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let mut tape = Tape::<f32>::new();
        let z = tape.input(&Tensor::from_rows(&[vec![1e4, -1e4, 0.0], vec![-1e4, -1e4, 1e4]]).unwrap());
        let p = tape.softmax_rows(z);
        let ce = tape.cross_entropy_logits(z, &[1, 0]).unwrap();
        let bce = tape.bce_logits(z, &[1., 0., 1., 0., 1., 0.]).unwrap();
        let total = tape.weighted_sum(&[(ce, 1.0), (bce, 1.0)]).unwrap();
        assert!(tape.value(p).iter().all(|x| x.is_finite()));
        assert!(tape.scalar(total).is_finite());
        let g = tape.backward(total).unwrap();
        assert!(g.get(z).unwrap().iter().all(|x| x.is_finite()));
    }
}
