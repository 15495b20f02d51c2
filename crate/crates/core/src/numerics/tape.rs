use std::collections::BTreeMap;
use std::sync::Arc;

use super::{NumericsError, Result, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-row list of key positions a query row may attend to.
///
/// Rows are sorted, contain only keys `j <= i`, and always contain `i` itself.
/// Keys outside the list are removed from the softmax entirely, so they get an
/// exact zero weight.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AllowedSet {
    rows: Vec<Vec<usize>>,
}

impl AllowedSet {
    pub fn causal(t: usize) -> Self {
        Self {
            rows: (0..t).map(|i| (0..=i).collect()).collect(),
        }
    }

    pub fn from_rows(mut rows: Vec<Vec<usize>>) -> Result<Self> {
        for (i, row) in rows.iter_mut().enumerate() {
            row.sort_unstable();
            row.dedup();
            if row.last() != Some(&i) {
                return Err(NumericsError::BadAttention(format!(
                    "row {i} must attend to itself and nothing later (got {row:?})"
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn from_matrix(m: &[Vec<bool>]) -> Result<Self> {
        let rows = m
            .iter()
            .map(|r| r.iter().enumerate().filter_map(|(j, &a)| a.then_some(j)).collect())
            .collect();
        Self::from_rows(rows)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.rows[i]
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.rows[i].binary_search(&j).is_ok()
    }

    pub fn to_matrix(&self) -> Vec<Vec<bool>> {
        let t = self.rows.len();
        self.rows
            .iter()
            .map(|r| {
                let mut out = vec![false; t];
                for &j in r {
                    out[j] = true;
                }
                out
            })
            .collect()
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    GatedAdd {
        base: Var,
        delta: Var,
        gate: Vec<bool>,
        scale: F,
    },
    Silu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Softmax(Var),
    Gather {
        src: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        allowed: Arc<AllowedSet>,
        offsets: Vec<usize>,
        probs: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        rows: Vec<(usize, usize)>,
        probs: Vec<F>,
    },
    PairedSqDist {
        x: Var,
        groups: Vec<(usize, Vec<usize>)>,
        per_dim_mean: bool,
    },
    Sum(Var),
    WeightedSum(Vec<(Var, F)>),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    grad: Option<Tensor<F>>,
}

/// Linear record of executed operations for reverse-mode differentiation.
///
/// A tape is confined to one thread. Gradients of leaves accumulate across
/// repeated [`Tape::backward`] calls until [`Tape::zero_grads`].
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<F: Scalar>(op: &'static str, data: &[F]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::NonFinite { op })
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// `a[m×p] · b[p×n]`. Each output element sums over `p` in index order, so a
/// row's result depends only on that row of `a`.
fn matmul_kernel<F: Scalar>(a: &[F], b: &[F], m: usize, p: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for k in 0..p {
            let aik = a[i * p + k];
            let brow = &b[k * n..(k + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    }
    out
}

/// `a[m×p] · b[n×p]ᵀ`.
fn matmul_t_kernel<F: Scalar>(a: &[F], b: &[F], m: usize, p: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        for j in 0..n {
            let brow = &b[j * p..(j + 1) * p];
            let mut acc = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `a[m×p]ᵀ · b[m×n]` giving `[p×n]`.
fn matmul_tn_kernel<F: Scalar>(a: &[F], b: &[F], m: usize, p: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); p * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for k in 0..p {
            let aik = a[i * p + k];
            let orow = &mut out[k * n..(k + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    }
    out
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<F: Scalar>(xs: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn accumulate<F: Scalar>(adj: &mut [Option<Vec<F>>], var: Var, contribution: Vec<F>) {
    match &mut adj[var.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e = *e + c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
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

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input tensor. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn matrix_dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.matrix_dims(a);
        let (p2, n) = self.matrix_dims(b);
        if p != p2 || self.shape(b).len() != 2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), m, p, n);
        check_finite("matmul", &out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`; the natural form for a weight stored as `[out×in]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.matrix_dims(a);
        let (n, p2) = self.matrix_dims(b);
        if p != p2 || self.shape(b).len() != 2 {
            return Err(shape_err("matmul_t", self.shape(a), self.shape(b)));
        }
        let out = matmul_t_kernel(self.value(a).data(), self.value(b).data(), m, p, n);
        check_finite("matmul_t", &out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        check_finite("add", &out)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        check_finite("mul", &out)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Result<Var> {
        let out: Vec<F> = self.value(a).data().iter().map(|&x| x * s).collect();
        check_finite("scale", &out)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Scale(a, s), rg))
    }

    /// Row `t` is `base_t + scale * delta_t` where `gate[t]`, else an exact copy of `base_t`.
    pub fn gated_add(&mut self, base: Var, delta: Var, gate: &[bool], scale: F) -> Result<Var> {
        if self.shape(base) != self.shape(delta) {
            return Err(shape_err("gated_add", self.shape(base), self.shape(delta)));
        }
        let (rows, cols) = self.matrix_dims(base);
        if gate.len() != rows {
            return Err(shape_err("gated_add gate", &[rows], &[gate.len()]));
        }
        let mut out = self.value(base).data().to_vec();
        let d = self.value(delta).data();
        for (t, &on) in gate.iter().enumerate() {
            if on {
                for c in t * cols..(t + 1) * cols {
                    out[c] = out[c] + scale * d[c];
                }
            }
        }
        check_finite("gated_add", &out)?;
        let shape = self.shape(base).to_vec();
        let rg = self.rg(&[base, delta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::GatedAdd {
                base,
                delta,
                gate: gate.to_vec(),
                scale,
            },
            rg,
        ))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<F> = self.value(a).data().iter().map(|&x| x * sigmoid(x)).collect();
        check_finite("silu", &out)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Silu(a), rg))
    }

    /// Per-row normalization to zero mean and unit variance (epsilon `1e-5`), then affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, d) = self.matrix_dims(x);
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let eps = F::from_f64_lossy(1e-5);
        let df = F::from_usize(d).expect("dimension fits");
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = Vec::with_capacity(rows * d);
        let mut xhat = Vec::with_capacity(rows * d);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
            let rs = F::one() / (var + eps).sqrt();
            rstd.push(rs);
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat.push(h);
                out.push(g[c] * h + b[c]);
            }
        }
        check_finite("layer_norm", &out)?;
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row-wise softmax. Entries equal to `-inf` are excluded and get probability exactly zero.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, n) = self.matrix_dims(x);
        let xv = self.value(x).data();
        if xv.iter().any(|v| v.is_nan() || *v == F::infinity()) {
            return Err(NumericsError::NonFinite { op: "softmax_rows" });
        }
        let mut out = vec![F::zero(); rows * n];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let max = row
                .iter()
                .copied()
                .filter(|v| v.is_finite())
                .fold(F::neg_infinity(), F::max);
            if !max.is_finite() {
                return Err(NumericsError::Invalid(format!(
                    "softmax row {r} excludes every position"
                )));
            }
            let mut sum = F::zero();
            for c in 0..n {
                if row[c].is_finite() {
                    let e = (row[c] - max).exp();
                    out[r * n + c] = e;
                    sum = sum + e;
                }
            }
            for c in 0..n {
                out[r * n + c] = out[r * n + c] / sum;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x), rg))
    }

    /// Selects rows of `src` by index (embedding lookup).
    pub fn gather_rows(&mut self, src: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.matrix_dims(src);
        let sv = self.value(src).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(NumericsError::OutOfRange {
                    what: "gather_rows",
                    index: id,
                    size: rows,
                });
            }
            out.extend_from_slice(&sv[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[src]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Gather { src, ids: ids.to_vec() },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, da) = self.matrix_dims(a);
        let (mb, db) = self.matrix_dims(b);
        if da != db {
            return Err(shape_err("concat_rows", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![ma + mb, da], out)?, Op::ConcatRows(a, b), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, pa) = self.matrix_dims(a);
        let (mb, pb) = self.matrix_dims(b);
        if ma != mb {
            return Err(shape_err("concat_cols", self.shape(a), self.shape(b)));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(ma * (pa + pb));
        for r in 0..ma {
            out.extend_from_slice(&av[r * pa..(r + 1) * pa]);
            out.extend_from_slice(&bv[r * pb..(r + 1) * pb]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![ma, pa + pb], out)?, Op::ConcatCols(a, b), rg))
    }

    /// Multi-head scaled dot-product attention restricted to `allowed`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, allowed: Arc<AllowedSet>) -> Result<Var> {
        let (t, d) = self.matrix_dims(q);
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return Err(shape_err("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(NumericsError::Invalid(format!("d={d} not divisible by heads={heads}")));
        }
        if allowed.len() != t {
            return Err(NumericsError::BadAttention(format!(
                "{} rows for {t} tokens",
                allowed.len()
            )));
        }
        let dh = d / heads;
        let scale = F::one() / F::from_usize(dh).expect("fits").sqrt();
        let mut offsets = Vec::with_capacity(t + 1);
        offsets.push(0);
        for i in 0..t {
            offsets.push(offsets[i] + allowed.row(i).len());
        }
        let total = offsets[t];
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut probs = vec![F::zero(); heads * total];
        let mut out = vec![F::zero(); t * d];
        let mut scores = Vec::new();
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..t {
                let keys = allowed.row(i);
                let qi = &qv[i * d + c0..i * d + c0 + dh];
                scores.clear();
                for &j in keys {
                    let kj = &kv[j * d + c0..j * d + c0 + dh];
                    let mut s = F::zero();
                    for (&a, &b) in qi.iter().zip(kj) {
                        s = s + a * b;
                    }
                    scores.push(s * scale);
                }
                let max = scores.iter().copied().fold(F::neg_infinity(), F::max);
                let mut sum = F::zero();
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum = sum + *s;
                }
                let base = h * total + offsets[i];
                let orow = &mut out[i * d + c0..i * d + c0 + dh];
                for (l, &j) in keys.iter().enumerate() {
                    let p = scores[l] / sum;
                    probs[base + l] = p;
                    let vj = &vv[j * d + c0..j * d + c0 + dh];
                    for (o, &x) in orow.iter_mut().zip(vj) {
                        *o = *o + p * x;
                    }
                }
            }
        }
        check_finite("attention", &out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::new(vec![t, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                allowed,
                offsets,
                probs,
            },
            rg,
        ))
    }

    /// Mean token cross-entropy over rows whose label is not `ignore`.
    ///
    /// Returns a scalar; with no labelled rows the loss is `0` and contributes no gradient.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u32], ignore: u32) -> Result<Var> {
        let (t, vsize) = self.matrix_dims(logits);
        if labels.len() != t {
            return Err(shape_err("cross_entropy labels", &[t], &[labels.len()]));
        }
        let lv = self.value(logits).data();
        let mut rows = Vec::new();
        let mut probs = Vec::new();
        let mut total = F::zero();
        for (r, &label) in labels.iter().enumerate() {
            if label == ignore {
                continue;
            }
            let label = label as usize;
            if label >= vsize {
                return Err(NumericsError::OutOfRange {
                    what: "cross_entropy label",
                    index: label,
                    size: vsize,
                });
            }
            let row = &lv[r * vsize..(r + 1) * vsize];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for &x in row {
                sum = sum + (x - max).exp();
            }
            let lse = max + sum.ln();
            total = total + (lse - row[label]);
            for &x in row {
                probs.push((x - max).exp() / sum);
            }
            rows.push((r, label));
        }
        let value = if rows.is_empty() {
            F::zero()
        } else {
            total / F::from_usize(rows.len()).expect("fits")
        };
        check_finite("cross_entropy", &[value])?;
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(value), Op::CrossEntropy { logits, rows, probs }, rg))
    }

    /// Mean squared distance between rows and detached target rows, grouped by target.
    ///
    /// `pairs` holds `(row, target_row)`. For each target the squared distances of its
    /// rows are averaged, then the per-target values are averaged. Target rows receive
    /// no gradient. With `per_dim_mean` each squared distance is divided by the width.
    pub fn paired_sq_dist(&mut self, x: Var, pairs: &[(usize, usize)], per_dim_mean: bool) -> Result<Var> {
        let (t, d) = self.matrix_dims(x);
        let mut grouped: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &(row, target) in pairs {
            for idx in [row, target] {
                if idx >= t {
                    return Err(NumericsError::OutOfRange {
                        what: "paired_sq_dist row",
                        index: idx,
                        size: t,
                    });
                }
            }
            grouped.entry(target).or_default().push(row);
        }
        let xv = self.value(x).data();
        let norm = if per_dim_mean {
            F::one() / F::from_usize(d).expect("fits")
        } else {
            F::one()
        };
        let mut total = F::zero();
        for (&target, rows) in &grouped {
            let a = &xv[target * d..(target + 1) * d];
            let mut group = F::zero();
            for &r in rows {
                let z = &xv[r * d..(r + 1) * d];
                let sq: F = a.iter().zip(z).map(|(&p, &q)| (p - q) * (p - q)).sum();
                group = group + sq * norm;
            }
            total = total + group / F::from_usize(rows.len()).expect("fits");
        }
        let value = if grouped.is_empty() {
            F::zero()
        } else {
            total / F::from_usize(grouped.len()).expect("fits")
        };
        check_finite("paired_sq_dist", &[value])?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::PairedSqDist {
                x,
                groups: grouped.into_iter().collect(),
                per_dim_mean,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: F = self.value(x).data().iter().copied().sum();
        check_finite("sum", &[s])?;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    /// `Σ wᵢ·xᵢ` over scalar inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, F)]) -> Result<Var> {
        let mut s = F::zero();
        for &(v, w) in terms {
            let val = self.value(v);
            if val.len() != 1 {
                return Err(NumericsError::NonScalarLoss(val.shape().to_vec()));
            }
            s = s + w * val.item();
        }
        check_finite("weighted_sum", &[s])?;
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Propagates `d loss / d x` to every leaf with `requires_grad`, visiting
    /// recorded ops in exact reverse order. Leaf gradients accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<F>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![F::one()]);
        let mut leaf_grads = Vec::new();
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(idx, g, &mut adj, &mut leaf_grads);
        }
        for (idx, g) in leaf_grads {
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(existing) => {
                    for (e, c) in existing.data_mut().iter_mut().zip(g) {
                        *e = *e + c;
                    }
                }
                slot @ None => {
                    *slot = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: Vec<F>, adj: &mut [Option<Vec<F>>], leaf_grads: &mut Vec<(usize, Vec<F>)>) {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => leaf_grads.push((idx, g)),
            Op::MatMul(a, b) => {
                let (m, p) = self.matrix_dims(*a);
                let n = self.matrix_dims(*b).1;
                if wants(*a) {
                    let da = matmul_t_kernel(&g, self.value(*b).data(), m, n, p);
                    accumulate(adj, *a, da);
                }
                if wants(*b) {
                    let db = matmul_tn_kernel(self.value(*a).data(), &g, m, p, n);
                    accumulate(adj, *b, db);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, p) = self.matrix_dims(*a);
                let n = self.matrix_dims(*b).0;
                if wants(*a) {
                    let da = matmul_kernel(&g, self.value(*b).data(), m, n, p);
                    accumulate(adj, *a, da);
                }
                if wants(*b) {
                    let db = matmul_tn_kernel(&g, self.value(*a).data(), m, n, p);
                    accumulate(adj, *b, db);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(adj, *a, g.clone());
                }
                if wants(*b) {
                    accumulate(adj, *b, g);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = self.value(*b).data();
                    accumulate(adj, *a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect());
                }
                if wants(*b) {
                    let av = self.value(*a).data();
                    accumulate(adj, *b, g.iter().zip(av).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale(a, s) => accumulate(adj, *a, g.iter().map(|&x| x * *s).collect()),
            Op::GatedAdd {
                base,
                delta,
                gate,
                scale,
            } => {
                if wants(*delta) {
                    let cols = self.matrix_dims(*delta).1;
                    let mut dd = vec![F::zero(); g.len()];
                    for (t, &on) in gate.iter().enumerate() {
                        if on {
                            for c in t * cols..(t + 1) * cols {
                                dd[c] = g[c] * *scale;
                            }
                        }
                    }
                    accumulate(adj, *delta, dd);
                }
                if wants(*base) {
                    accumulate(adj, *base, g);
                }
            }
            Op::Silu(a) => {
                let av = self.value(*a).data();
                let dx = g
                    .iter()
                    .zip(av)
                    .map(|(&gy, &x)| {
                        let s = sigmoid(x);
                        gy * s * (F::one() + x * (F::one() - s))
                    })
                    .collect();
                accumulate(adj, *a, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (rows, d) = self.matrix_dims(*x);
                let gv = self.value(*gain).data();
                let df = F::from_usize(d).expect("fits");
                if wants(*x) {
                    let mut dx = vec![F::zero(); rows * d];
                    for r in 0..rows {
                        let mut mean_dh = F::zero();
                        let mut mean_dh_h = F::zero();
                        for c in 0..d {
                            let dh = g[r * d + c] * gv[c];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * xhat[r * d + c];
                        }
                        mean_dh = mean_dh / df;
                        mean_dh_h = mean_dh_h / df;
                        for c in 0..d {
                            let dh = g[r * d + c] * gv[c];
                            dx[r * d + c] = rstd[r] * (dh - mean_dh - xhat[r * d + c] * mean_dh_h);
                        }
                    }
                    accumulate(adj, *x, dx);
                }
                if wants(*gain) {
                    let mut dg = vec![F::zero(); d];
                    for r in 0..rows {
                        for c in 0..d {
                            dg[c] = dg[c] + g[r * d + c] * xhat[r * d + c];
                        }
                    }
                    accumulate(adj, *gain, dg);
                }
                if wants(*bias) {
                    let mut db = vec![F::zero(); d];
                    for r in 0..rows {
                        for c in 0..d {
                            db[c] = db[c] + g[r * d + c];
                        }
                    }
                    accumulate(adj, *bias, db);
                }
            }
            Op::Softmax(a) => {
                let (rows, n) = self.matrix_dims(*a);
                let p = node.value.data();
                let mut dx = vec![F::zero(); rows * n];
                for r in 0..rows {
                    let s: F = (0..n).map(|c| p[r * n + c] * g[r * n + c]).sum();
                    for c in 0..n {
                        dx[r * n + c] = p[r * n + c] * (g[r * n + c] - s);
                    }
                }
                accumulate(adj, *a, dx);
            }
            Op::Gather { src, ids } => {
                let (rows, d) = self.matrix_dims(*src);
                let mut ds = vec![F::zero(); rows * d];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        ds[id * d + c] = ds[id * d + c] + g[r * d + c];
                    }
                }
                accumulate(adj, *src, ds);
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).len();
                if wants(*a) {
                    accumulate(adj, *a, g[..na].to_vec());
                }
                if wants(*b) {
                    accumulate(adj, *b, g[na..].to_vec());
                }
            }
            Op::ConcatCols(a, b) => {
                let (m, pa) = self.matrix_dims(*a);
                let pb = self.matrix_dims(*b).1;
                let w = pa + pb;
                if wants(*a) {
                    let da = (0..m).flat_map(|r| g[r * w..r * w + pa].iter().copied()).collect();
                    accumulate(adj, *a, da);
                }
                if wants(*b) {
                    let db = (0..m)
                        .flat_map(|r| g[r * w + pa..(r + 1) * w].iter().copied())
                        .collect();
                    accumulate(adj, *b, db);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                allowed,
                offsets,
                probs,
            } => {
                let (t, d) = self.matrix_dims(*q);
                let dh = d / heads;
                let scale = F::one() / F::from_usize(dh).expect("fits").sqrt();
                let total = offsets[t];
                let qv = self.value(*q).data();
                let kv = self.value(*k).data();
                let vv = self.value(*v).data();
                let mut dq = vec![F::zero(); t * d];
                let mut dk = vec![F::zero(); t * d];
                let mut dv = vec![F::zero(); t * d];
                let mut dp = Vec::new();
                for h in 0..*heads {
                    let c0 = h * dh;
                    for i in 0..t {
                        let keys = allowed.row(i);
                        let base = h * total + offsets[i];
                        let gi = &g[i * d + c0..i * d + c0 + dh];
                        dp.clear();
                        let mut weighted = F::zero();
                        for (l, &j) in keys.iter().enumerate() {
                            let vj = &vv[j * d + c0..j * d + c0 + dh];
                            let dpl: F = gi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                            let p = probs[base + l];
                            for (c, &gc) in gi.iter().enumerate() {
                                dv[j * d + c0 + c] = dv[j * d + c0 + c] + p * gc;
                            }
                            weighted = weighted + p * dpl;
                            dp.push(dpl);
                        }
                        for (l, &j) in keys.iter().enumerate() {
                            let ds = probs[base + l] * (dp[l] - weighted) * scale;
                            for c in 0..dh {
                                dq[i * d + c0 + c] = dq[i * d + c0 + c] + ds * kv[j * d + c0 + c];
                                dk[j * d + c0 + c] = dk[j * d + c0 + c] + ds * qv[i * d + c0 + c];
                            }
                        }
                    }
                }
                if wants(*q) {
                    accumulate(adj, *q, dq);
                }
                if wants(*k) {
                    accumulate(adj, *k, dk);
                }
                if wants(*v) {
                    accumulate(adj, *v, dv);
                }
            }
            Op::CrossEntropy { logits, rows, probs } => {
                let (t, vsize) = self.matrix_dims(*logits);
                let mut dl = vec![F::zero(); t * vsize];
                if !rows.is_empty() {
                    let w = g[0] / F::from_usize(rows.len()).expect("fits");
                    for (n, &(r, label)) in rows.iter().enumerate() {
                        for c in 0..vsize {
                            let mut p = probs[n * vsize + c];
                            if c == label {
                                p = p - F::one();
                            }
                            dl[r * vsize + c] = p * w;
                        }
                    }
                }
                accumulate(adj, *logits, dl);
            }
            Op::PairedSqDist {
                x,
                groups,
                per_dim_mean,
            } => {
                let (t, d) = self.matrix_dims(*x);
                let xv = self.value(*x).data();
                let mut dx = vec![F::zero(); t * d];
                if !groups.is_empty() {
                    let norm = if *per_dim_mean {
                        F::one() / F::from_usize(d).expect("fits")
                    } else {
                        F::one()
                    };
                    let outer = g[0] / F::from_usize(groups.len()).expect("fits");
                    let two = F::one() + F::one();
                    for (target, rows) in groups {
                        let w = outer / F::from_usize(rows.len()).expect("fits") * norm * two;
                        for &r in rows {
                            for c in 0..d {
                                dx[r * d + c] = dx[r * d + c] + w * (xv[r * d + c] - xv[target * d + c]);
                            }
                        }
                    }
                }
                accumulate(adj, *x, dx);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                accumulate(adj, *a, vec![g[0]; n]);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if wants(v) {
                        accumulate(adj, v, vec![g[0] * w]);
                    }
                }
            }
        }
    }
}
