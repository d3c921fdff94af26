//! Reverse-mode tape.
//!
//! Every op appends a node holding its forward value and enough of an
//! operation record to push gradients to its parents. Nodes are stored in
//! creation order, so a reverse sweep over the vector is a valid
//! topological order for the backward pass.

use super::array::{gemm_nn, gemm_nt, gemm_tn, gemm_view, Array, Real, Strided};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Lower bound on the norms inside cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    RmsNorm { x: Var, gain: Var, inv: Vec<T> },
    Softmax(Var),
    CausalAttention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    Rope { x: Var, heads: usize, base: f64 },
    ColSlice { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows(Vec<(Var, Vec<usize>)>),
    PoolTokens { x: Var, side: usize, factor: usize },
    Sum(Var),
    Mean(Var),
    CosineAlign { q: Var, target: Array<T> },
    CrossEntropy { logits: Var, labels: Vec<i64>, probs: Array<T> },
}

pub struct Node<T> {
    value: Array<T>,
    grad: Option<Array<T>>,
    op: Op<T>,
    requires_grad: bool,
}

impl<T> Node<T> {
    pub fn value(&self) -> &Array<T> {
        &self.value
    }

    pub fn grad(&self) -> Option<&Array<T>> {
        self.grad.as_ref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Array<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Array<T>> {
        self.nodes[v.0].grad.take()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn leaf(&mut self, value: Array<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[v.0].value.as_matrix(op)
    }

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = Array::zeros(&[m, n]);
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), T::zero(), out.data_mut());
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a[m,k] · b[n,k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul_nt")?;
        let (n, k2) = self.matrix(b, "matmul_nt")?;
        if k != k2 {
            return Err(dim_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = Array::zeros(&[m, n]);
        gemm_nt(m, k, n, self.value(a).data(), self.value(b).data(), T::zero(), out.data_mut());
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err("add", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Broadcast-add a `[c]` vector to every row of `x[..., c]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.shape(bias) != [c] {
            return Err(dim_err("add_row", self.shape(x), self.shape(bias)));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err("mul", self.shape(a), self.shape(b)));
        }
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Array::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(&[x]);
        self.push(out, Op::Silu(x), rg)
    }

    /// Row-wise `x / sqrt(mean(x²) + eps) * gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.shape(gain) != [d] {
            return Err(dim_err("rms_norm", self.shape(x), self.shape(gain)));
        }
        let eps = T::lit(eps);
        let dn = T::lit(d as f64);
        let xv = self.value(x);
        let g = self.value(gain).data();
        let mut out = xv.clone();
        let mut inv = Vec::with_capacity(xv.rows());
        for row in out.data_mut().chunks_mut(d) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / dn;
            let r = T::one() / (ms + eps).sqrt();
            inv.push(r);
            for (o, &gv) in row.iter_mut().zip(g) {
                *o = *o * r * gv;
            }
        }
        let rg = self.rg(&[x, gain]);
        Ok(self.push(out, Op::RmsNorm { x, gain, inv }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Softmax of a square score matrix where row `i` only sees columns
    /// `j <= i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix(x, "causal_softmax")?;
        if r != c {
            return Err(dim_err("causal_softmax", self.shape(x), &[r, r]));
        }
        let mut out = self.value(x).clone();
        for (i, row) in out.data_mut().chunks_mut(c).enumerate() {
            softmax_in_place(&mut row[..=i]);
            row[i + 1..].fill(T::zero());
        }
        let rg = self.rg(&[x]);
        // Masked entries are zero in the output, so the plain softmax
        // backward already gives them zero gradient.
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Multi-head causal self-attention `softmax(Q_h K_hᵀ / √dh) V_h` over
    /// `[L, heads·dh]` inputs; head outputs are concatenated along columns.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (l, d) = self.matrix(q, "causal_attention")?;
        if self.shape(k) != [l, d] || self.shape(v) != [l, d] {
            return Err(dim_err("causal_attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Contract(format!("width {d} does not split into {heads} heads")));
        }
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); heads * l * l];
        let mut out = Array::zeros(&[l, d]);
        for (h, p) in probs.chunks_mut(l * l).enumerate() {
            let col = h * dh;
            for (r0, r1) in causal_blocks(l) {
                let m = r1 - r0;
                gemm_view(m, dh, r1, qv, Strided::rows(r0 * d + col, d), kv, Strided::transposed(col, d), T::zero(), p, Strided::rows(r0 * l, l));
                for i in r0..r1 {
                    let row = &mut p[i * l..i * l + r1];
                    for x in row[..=i].iter_mut() {
                        *x = *x * scale;
                    }
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].fill(T::zero());
                }
                gemm_view(m, r1, dh, p, Strided::rows(r0 * l, l), vv, Strided::rows(col, d), T::zero(), out.data_mut(), Strided::rows(r0 * d + col, d));
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(out, Op::CausalAttention { q, k, v, heads, probs }, rg))
    }

    /// Per-head `L × L` weights recorded by [`Tape::causal_attention`].
    pub fn attention_weights(&self, node: Var) -> Option<Vec<Array<T>>> {
        match &self.nodes[node.0].op {
            Op::CausalAttention { probs, heads, .. } => {
                let l = self.nodes[node.0].value.rows();
                Some(
                    probs
                        .chunks(l * l)
                        .take(*heads)
                        .map(|p| Array::new(vec![l, l], p.to_vec()).expect("square"))
                        .collect(),
                )
            }
            _ => None,
        }
    }

    /// Rotary position encoding on `x[L, heads·dh]`; row index is the
    /// position. Each head rotates pairs `(i, i + dh/2)`.
    pub fn rope(&mut self, x: Var, heads: usize, base: f64) -> Result<Var> {
        let (l, d) = self.matrix(x, "rope")?;
        if heads == 0 || d % heads != 0 || (d / heads) % 2 != 0 {
            return Err(Error::Contract(format!(
                "rope needs an even per-head width; width {d}, heads {heads}"
            )));
        }
        let table = rope_table::<T>(l, d / heads, base);
        let mut out = self.value(x).clone();
        rotate(out.data_mut(), l, d, heads, &table, false);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Rope { x, heads, base }, rg))
    }

    pub fn col_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix(x, "col_slice")?;
        if len == 0 || start + len > c {
            return Err(dim_err("col_slice", self.shape(x), &[start, len]));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for row in src.chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Array::new(vec![r, len], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::ColSlice { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let (r, _) = self.matrix(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.matrix(p, "concat_cols")?;
            if pr != r {
                return Err(dim_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Array::new(vec![r, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let c = self.value(first).cols();
        let mut data = Vec::new();
        for &p in parts {
            let (_, pc) = self.matrix(p, "concat_rows")?;
            if pc != c {
                return Err(dim_err("concat_rows", self.shape(first), self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / c;
        let out = Array::new(vec![rows, c], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `x[idx[0]], x[idx[1]], ...`; repeats allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix(x, "gather_rows")?;
        if idx.is_empty() || idx.iter().any(|&i| i >= r) {
            return Err(Error::Contract(format!(
                "gather_rows: {} indices into {r} rows",
                idx.len()
            )));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(src.row(i));
        }
        let out = Array::new(vec![idx.len(), c], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    /// Inverse of a partition by [`Tape::gather_rows`]: row `k` of part `p`
    /// lands at output row `parts[p].1[k]`. Every output row must be
    /// covered exactly once.
    pub fn scatter_rows(&mut self, parts: Vec<(Var, Vec<usize>)>, rows: usize) -> Result<Var> {
        let c = match parts.first() {
            Some((v, _)) => self.value(*v).cols(),
            None => return Err(Error::Contract("scatter_rows of nothing".into())),
        };
        let mut seen = vec![false; rows];
        let mut out = Array::zeros(&[rows, c]);
        for (v, idx) in &parts {
            let val = self.value(*v);
            if val.cols() != c || val.rows() != idx.len() {
                return Err(dim_err("scatter_rows", val.shape(), &[idx.len(), c]));
            }
            for (k, &dst) in idx.iter().enumerate() {
                if dst >= rows || seen[dst] {
                    return Err(Error::Contract(format!(
                        "scatter_rows: row {dst} out of range or covered twice"
                    )));
                }
                seen[dst] = true;
                out.row_mut(dst).copy_from_slice(val.row(k));
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Contract(format!("scatter_rows: row {missing} not covered")));
        }
        let vars: Vec<Var> = parts.iter().map(|(v, _)| *v).collect();
        let rg = self.rg(&vars);
        Ok(self.push(out, Op::ScatterRows(parts), rg))
    }

    /// Average-pool a row-major `side × side` token grid with a
    /// non-overlapping `factor × factor` window.
    pub fn pool_tokens(&mut self, x: Var, side: usize, factor: usize) -> Result<Var> {
        let (r, c) = self.matrix(x, "pool_tokens")?;
        if factor == 0 || side % factor != 0 || r != side * side {
            return Err(Error::Geometry(format!(
                "cannot pool {r} tokens as a {side}x{side} grid by {factor}"
            )));
        }
        let out_side = side / factor;
        let inv = T::one() / T::lit((factor * factor) as f64);
        let src = self.value(x);
        let mut out = Array::zeros(&[out_side * out_side, c]);
        for orow in 0..out_side {
            for ocol in 0..out_side {
                let dst = out.row_mut(orow * out_side + ocol);
                for a in 0..factor {
                    for b in 0..factor {
                        let s = src.row((orow * factor + a) * side + ocol * factor + b);
                        for (d, &v) in dst.iter_mut().zip(s) {
                            *d = *d + v;
                        }
                    }
                }
                for d in dst.iter_mut() {
                    *d = *d * inv;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::PoolTokens { x, side, factor }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Array::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Array::scalar(v.sum() / T::lit(v.len() as f64));
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    /// Mean over rows of `1 − cos(q_i, target_i)`. A zero-norm `q` row has
    /// cosine 0 and receives no gradient; a zero-norm target row is an error.
    pub fn cosine_align(&mut self, q: Var, target: Array<T>) -> Result<Var> {
        if self.shape(q) != target.shape() || self.shape(q).len() != 2 {
            return Err(dim_err("cosine_align", self.shape(q), target.shape()));
        }
        let eps = T::lit(COSINE_EPS);
        for i in 0..target.rows() {
            if norm(target.row(i)) < eps {
                return Err(Error::DegenerateTarget { row: i });
            }
        }
        let qv = self.value(q);
        let n = qv.rows();
        let mut total = T::zero();
        for i in 0..n {
            total = total + (T::one() - cosine(qv.row(i), target.row(i), eps));
        }
        let out = Array::scalar(total / T::lit(n as f64));
        let rg = self.rg(&[q]);
        Ok(self.push(out, Op::CosineAlign { q, target }, rg))
    }

    /// Mean cross-entropy of `logits[L, V]` over positions whose label is
    /// non-negative.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[i64]) -> Result<Var> {
        let (l, v) = self.matrix(logits, "cross_entropy")?;
        if labels.len() != l {
            return Err(dim_err("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= v as i64) {
            return Err(Error::Contract(format!("label {bad} outside vocabulary of {v}")));
        }
        let active = labels.iter().filter(|&&y| y >= 0).count();
        if active == 0 {
            return Err(Error::Contract("cross_entropy with zero active labels".into()));
        }
        let mut probs = self.value(logits).clone();
        let mut total = T::zero();
        for (i, row) in probs.data_mut().chunks_mut(v).enumerate() {
            let y = labels[i];
            if y < 0 {
                row.fill(T::zero());
                continue;
            }
            let lse = log_sum_exp(row);
            total = total + (lse - row[y as usize]);
            for p in row.iter_mut() {
                *p = (*p - lse).exp();
            }
        }
        let out = Array::scalar(total / T::lit(active as f64));
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Accumulate `d loss / d node` into every reachable node that requires
    /// gradients. Gradients add onto whatever is already stored.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let seed = Array::filled(self.shape(loss), T::one());
        match &mut self.nodes[loss.0].grad {
            Some(g) => g.add_assign(&seed),
            slot => *slot = Some(seed),
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let (before, rest) = self.nodes.split_at_mut(i);
            propagate(before, &rest[0], &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }
}

/// Row blocks `[r0, r1)` of a causal `l × l` score matrix. Block `b` only
/// needs key columns `..r1`, which skips most of the masked upper triangle.
fn causal_blocks(l: usize) -> impl Iterator<Item = (usize, usize)> {
    const BLOCK: usize = 64;
    (0..l).step_by(BLOCK).map(move |r0| (r0, (r0 + BLOCK).min(l)))
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn norm<T: Real>(x: &[T]) -> T {
    x.iter().map(|&v| v * v).sum::<T>().sqrt()
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn cosine<T: Real>(a: &[T], b: &[T], eps: T) -> T {
    let na = norm(a);
    if na < eps {
        return T::zero();
    }
    dot(a, b) / (na * norm(b).max(eps))
}

fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s = s + *x;
    }
    let inv = T::one() / s;
    for x in row.iter_mut() {
        *x = *x * inv;
    }
}

/// `[L, dh/2]` (cos, sin) pairs.
fn rope_table<T: Real>(l: usize, dh: usize, base: f64) -> Vec<(T, T)> {
    let half = dh / 2;
    let freqs: Vec<f64> = (0..half).map(|i| base.powf(-2.0 * i as f64 / dh as f64)).collect();
    let mut t = Vec::with_capacity(l * half);
    for p in 0..l {
        for &f in &freqs {
            let (sin, cos) = (p as f64 * f).sin_cos();
            t.push((T::lit(cos), T::lit(sin)));
        }
    }
    t
}

fn rotate<T: Real>(data: &mut [T], l: usize, d: usize, heads: usize, table: &[(T, T)], inverse: bool) {
    let dh = d / heads;
    let half = dh / 2;
    for p in 0..l {
        let row = &mut data[p * d..(p + 1) * d];
        for h in 0..heads {
            let head = &mut row[h * dh..(h + 1) * dh];
            for i in 0..half {
                let (c, mut s) = table[p * half + i];
                if inverse {
                    s = -s;
                }
                let (x1, x2) = (head[i], head[i + half]);
                head[i] = x1 * c - x2 * s;
                head[i + half] = x1 * s + x2 * c;
            }
        }
    }
}

/// Run `f` against the gradient buffer of `v` (created zeroed on demand)
/// while the rest of the tape stays readable.
fn with_grad<T: Real>(nodes: &mut [Node<T>], v: Var, f: impl FnOnce(&mut Array<T>, &[Node<T>])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let mut g = nodes[v.0]
        .grad
        .take()
        .unwrap_or_else(|| Array::zeros(nodes[v.0].value.shape()));
    f(&mut g, nodes);
    nodes[v.0].grad = Some(g);
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn propagate<T: Real>(nodes: &mut [Node<T>], node: &Node<T>, g: &Array<T>) {
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            let n = nodes[b.0].value.shape()[1];
            // dA += G·Bᵀ
            with_grad(nodes, *a, |ga, ns| {
                gemm_nt(m, n, k, gd, ns[b.0].value.data(), T::one(), ga.data_mut())
            });
            // dB += Aᵀ·G
            with_grad(nodes, *b, |gb, ns| {
                gemm_tn(k, m, n, ns[a.0].value.data(), gd, T::one(), gb.data_mut())
            });
        }
        Op::MatMulNt(a, b) => {
            let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            let n = nodes[b.0].value.shape()[0];
            // dA += G·B
            with_grad(nodes, *a, |ga, ns| {
                gemm_nn(m, n, k, gd, ns[b.0].value.data(), T::one(), ga.data_mut())
            });
            // dB += Gᵀ·A
            with_grad(nodes, *b, |gb, ns| {
                gemm_tn(n, m, k, gd, ns[a.0].value.data(), T::one(), gb.data_mut())
            });
        }
        Op::Add(a, b) => {
            with_grad(nodes, *a, |ga, _| add_into(ga.data_mut(), gd));
            with_grad(nodes, *b, |gb, _| add_into(gb.data_mut(), gd));
        }
        Op::AddRow(x, bias) => {
            with_grad(nodes, *x, |gx, _| add_into(gx.data_mut(), gd));
            with_grad(nodes, *bias, |gb, _| {
                let c = gb.len();
                for row in gd.chunks(c) {
                    add_into(gb.data_mut(), row);
                }
            });
        }
        Op::Mul(a, b) => {
            with_grad(nodes, *a, |ga, ns| {
                for ((d, &gv), &bv) in ga.data_mut().iter_mut().zip(gd).zip(ns[b.0].value.data()) {
                    *d = *d + gv * bv;
                }
            });
            with_grad(nodes, *b, |gb, ns| {
                for ((d, &gv), &av) in gb.data_mut().iter_mut().zip(gd).zip(ns[a.0].value.data()) {
                    *d = *d + gv * av;
                }
            });
        }
        Op::Scale(x, c) => {
            with_grad(nodes, *x, |gx, _| {
                for (d, &gv) in gx.data_mut().iter_mut().zip(gd) {
                    *d = *d + gv * *c;
                }
            });
        }
        Op::Silu(x) => {
            with_grad(nodes, *x, |gx, ns| {
                for ((d, &gv), &xv) in gx.data_mut().iter_mut().zip(gd).zip(ns[x.0].value.data()) {
                    let s = sigmoid(xv);
                    *d = *d + gv * s * (T::one() + xv * (T::one() - s));
                }
            });
        }
        Op::RmsNorm { x, gain, inv } => {
            let d = nodes[x.0].value.cols();
            let dn = T::lit(d as f64);
            with_grad(nodes, *x, |gx, ns| {
                let xv = ns[x.0].value.data();
                let gn = ns[gain.0].value.data();
                for (r, &iv) in inv.iter().enumerate() {
                    let xr = &xv[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let proj: T = xr.iter().zip(gr).zip(gn).map(|((&a, &b), &w)| a * b * w).sum();
                    let coef = proj * iv * iv * iv / dn;
                    let out = &mut gx.data_mut()[r * d..(r + 1) * d];
                    for j in 0..d {
                        out[j] = out[j] + gr[j] * gn[j] * iv - xr[j] * coef;
                    }
                }
            });
            with_grad(nodes, *gain, |gg, ns| {
                let xv = ns[x.0].value.data();
                for (r, &iv) in inv.iter().enumerate() {
                    for j in 0..d {
                        let acc = gg.data()[j] + gd[r * d + j] * xv[r * d + j] * iv;
                        gg.data_mut()[j] = acc;
                    }
                }
            });
        }
        Op::Softmax(x) => {
            let y = node.value.data();
            let c = node.value.cols();
            with_grad(nodes, *x, |gx, _| {
                for ((grow, yrow), dst) in gd.chunks(c).zip(y.chunks(c)).zip(gx.data_mut().chunks_mut(c)) {
                    let s = dot(grow, yrow);
                    for j in 0..c {
                        dst[j] = dst[j] + yrow[j] * (grow[j] - s);
                    }
                }
            });
        }
        Op::CausalAttention { q, k, v, heads, probs } => {
            let (l, d) = (node.value.rows(), node.value.cols());
            let dh = d / heads;
            let scale = T::one() / T::lit(dh as f64).sqrt();
            let mut ds = vec![T::zero(); l * l];
            for (h, p) in probs.chunks(l * l).enumerate() {
                let col = h * dh;
                for (r0, r1) in causal_blocks(l) {
                    let m = r1 - r0;
                    // dV_h[..r1] += P_hᵀ · dO_h over this row block
                    with_grad(nodes, *v, |gv, _| {
                        gemm_view(r1, m, dh, p, Strided::transposed(r0 * l, l), gd, Strided::rows(r0 * d + col, d), T::one(), gv.data_mut(), Strided::rows(col, d))
                    });
                    // dP = dO_h · V_hᵀ, then the softmax and scale backward.
                    let vv = nodes[v.0].value.data();
                    gemm_view(m, dh, r1, gd, Strided::rows(r0 * d + col, d), vv, Strided::transposed(col, d), T::zero(), &mut ds, Strided::rows(r0 * l, l));
                    for i in r0..r1 {
                        let (drow, prow) = (&mut ds[i * l..i * l + r1], &p[i * l..i * l + r1]);
                        let s = dot(&drow[..=i], &prow[..=i]);
                        for j in 0..=i {
                            drow[j] = prow[j] * (drow[j] - s) * scale;
                        }
                        drow[i + 1..].fill(T::zero());
                    }
                    // dQ_h += dS · K_h ; dK_h += dSᵀ · Q_h
                    with_grad(nodes, *q, |gq, ns| {
                        gemm_view(m, r1, dh, &ds, Strided::rows(r0 * l, l), ns[k.0].value.data(), Strided::rows(col, d), T::one(), gq.data_mut(), Strided::rows(r0 * d + col, d))
                    });
                    with_grad(nodes, *k, |gk, ns| {
                        gemm_view(r1, m, dh, &ds, Strided::transposed(r0 * l, l), ns[q.0].value.data(), Strided::rows(r0 * d + col, d), T::one(), gk.data_mut(), Strided::rows(col, d))
                    });
                }
            }
        }
        Op::Rope { x, heads, base } => {
            let (l, d) = (node.value.shape()[0], node.value.shape()[1]);
            let table = rope_table::<T>(l, d / heads, *base);
            let mut back = gd.to_vec();
            rotate(&mut back, l, d, *heads, &table, true);
            with_grad(nodes, *x, |gx, _| add_into(gx.data_mut(), &back));
        }
        Op::ColSlice { x, start } => {
            let len = node.value.cols();
            with_grad(nodes, *x, |gx, _| {
                let c = gx.cols();
                for (r, grow) in gd.chunks(len).enumerate() {
                    add_into(&mut gx.data_mut()[r * c + start..r * c + start + len], grow);
                }
            });
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let mut offset = 0;
            for p in parts {
                let w = nodes[p.0].value.cols();
                with_grad(nodes, *p, |gp, _| {
                    for (r, dst) in gp.data_mut().chunks_mut(w).enumerate() {
                        add_into(dst, &gd[r * total + offset..r * total + offset + w]);
                    }
                });
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = nodes[p.0].value.len();
                with_grad(nodes, *p, |gp, _| add_into(gp.data_mut(), &gd[offset..offset + n]));
                offset += n;
            }
        }
        Op::GatherRows { x, idx } => {
            with_grad(nodes, *x, |gx, _| {
                let c = gx.cols();
                for (k, &src) in idx.iter().enumerate() {
                    add_into(gx.row_mut(src), &gd[k * c..(k + 1) * c]);
                }
            });
        }
        Op::ScatterRows(parts) => {
            let c = node.value.cols();
            for (p, idx) in parts {
                with_grad(nodes, *p, |gp, _| {
                    for (k, &dst) in idx.iter().enumerate() {
                        add_into(gp.row_mut(k), &gd[dst * c..(dst + 1) * c]);
                    }
                });
            }
        }
        Op::PoolTokens { x, side, factor } => {
            let (side, factor) = (*side, *factor);
            let out_side = side / factor;
            let c = node.value.cols();
            let inv = T::one() / T::lit((factor * factor) as f64);
            with_grad(nodes, *x, |gx, _| {
                for orow in 0..out_side {
                    for ocol in 0..out_side {
                        let src = &gd[(orow * out_side + ocol) * c..(orow * out_side + ocol + 1) * c];
                        for a in 0..factor {
                            for b in 0..factor {
                                let dst = gx.row_mut((orow * factor + a) * side + ocol * factor + b);
                                for (d, &s) in dst.iter_mut().zip(src) {
                                    *d = *d + s * inv;
                                }
                            }
                        }
                    }
                }
            });
        }
        Op::Sum(x) => {
            let s = gd[0];
            with_grad(nodes, *x, |gx, _| {
                for d in gx.data_mut() {
                    *d = *d + s;
                }
            });
        }
        Op::Mean(x) => {
            let n = T::lit(nodes[x.0].value.len() as f64);
            let s = gd[0] / n;
            with_grad(nodes, *x, |gx, _| {
                for d in gx.data_mut() {
                    *d = *d + s;
                }
            });
        }
        Op::CosineAlign { q, target } => {
            let eps = T::lit(COSINE_EPS);
            let n = target.rows();
            let scale = gd[0] / T::lit(n as f64);
            with_grad(nodes, *q, |gq, ns| {
                let qv = &ns[q.0].value;
                for i in 0..n {
                    let (qr, vr) = (qv.row(i), target.row(i));
                    let nq = norm(qr);
                    if nq < eps {
                        continue;
                    }
                    let nv = norm(vr).max(eps);
                    let cos = dot(qr, vr) / (nq * nv);
                    let dst = gq.row_mut(i);
                    for j in 0..qr.len() {
                        let dcos = vr[j] / (nq * nv) - cos * qr[j] / (nq * nq);
                        dst[j] = dst[j] - scale * dcos;
                    }
                }
            });
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let active = labels.iter().filter(|&&y| y >= 0).count();
            let scale = gd[0] / T::lit(active as f64);
            let v = probs.cols();
            with_grad(nodes, *logits, |gl, _| {
                for (i, &y) in labels.iter().enumerate() {
                    if y < 0 {
                        continue;
                    }
                    let p = probs.row(i);
                    let dst = &mut gl.data_mut()[i * v..(i + 1) * v];
                    for j in 0..v {
                        dst[j] = dst[j] + scale * p[j];
                    }
                    dst[y as usize] = dst[y as usize] - scale;
                }
            });
        }
    }
}
