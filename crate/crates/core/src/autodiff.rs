//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Operations are recorded in execution order, so the tape is always
//! topologically sorted and backward is a single reverse sweep. Ops are
//! coarse-grained (matmul, attention, fused cross-entropy) to keep the
//! bookkeeping overhead small next to the arithmetic.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Cubic coefficient of the tanh approximation to GELU.
pub const GELU_COEFF: f64 = 0.044715;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Divide(Var, f64),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Normalize {
        x: Var,
        inv_std: Vec<f64>,
    },
    Affine {
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterAddRows {
        x: Var,
        idx: Vec<usize>,
    },
    Gates {
        probs: Var,
        selected: Vec<Vec<usize>>,
        renormalize: bool,
    },
    ScaleRows {
        x: Var,
        s: Var,
    },
    ConcatRows(Vec<Var>),
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        rows: Vec<(usize, usize, f64)>,
        softmax: Vec<f64>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    Sum(Var),
    Combine(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations for backward traversal.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::invalid(op, format!("expected a matrix, got {s:?}"))),
    }
}

fn last_dim(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1)
}

fn gelu_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x)
}

/// Tanh-approximate GELU on plain values, shared with non-tape code paths.
pub fn gelu(x: f64) -> f64 {
    gelu_scalar(x)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op_name.to_string(),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let mut value = value;
        value.set_requires_grad(false);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf. Gradients flow to it iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var> {
        if !tensor.is_finite() {
            return Err(Error::NonFinite { op: "leaf".to_string() });
        }
        let requires_grad = tensor.requires_grad();
        let mut value = tensor;
        value.zero_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Result<Var> {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    /// Copies `v` into a new leaf that does not propagate gradients.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, n) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a).values(), self.value(b).values(), m, k, n, &mut out);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul_nt")?;
        let (n, k2) = dims2(self.value(b), "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(self.value(a).values(), self.value(b).values(), m, k, n, &mut out);
        self.push("matmul_nt", Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(a), "transpose")?;
        let src = self.value(a).values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push("transpose", Tensor::new(vec![n, m], out)?, Op::Transpose(a), &[a])
    }

    /// Same values under a new shape with equal element count.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let out: Vec<f64> = ta.values().iter().zip(tb.values()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        self.push("add", Tensor::new(shape, out)?, Op::Add(a, b), &[a, b])
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "add_row")?;
        if self.value(bias).len() != n {
            return Err(Error::shape("add_row", self.value(x).shape(), self.value(bias).shape()));
        }
        let b = self.value(bias).values();
        let mut out = self.value(x).values().to_vec();
        for row in out.chunks_mut(n).take(m) {
            add_into(row, b);
        }
        self.push(
            "add_row",
            Tensor::new(vec![m, n], out)?,
            Op::AddRow(x, bias),
            &[x, bias],
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let out: Vec<f64> = ta.values().iter().zip(tb.values()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        self.push("mul", Tensor::new(shape, out)?, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let out: Vec<f64> = t.values().iter().map(|x| x * c).collect();
        let shape = t.shape().to_vec();
        self.push("scale", Tensor::new(shape, out)?, Op::Scale(a, c), &[a])
    }

    /// Elementwise `a / d`. Unlike `scale(a, 1/d)` this is exact whenever
    /// the quotient is representable.
    pub fn divide(&mut self, a: Var, d: f64) -> Result<Var> {
        let t = self.value(a);
        let out: Vec<f64> = t.values().iter().map(|x| x / d).collect();
        let shape = t.shape().to_vec();
        self.push("divide", Tensor::new(shape, out)?, Op::Divide(a, d), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out: Vec<f64> = t.values().iter().map(|&x| gelu_scalar(x)).collect();
        let shape = t.shape().to_vec();
        self.push("gelu", Tensor::new(shape, out)?, Op::Gelu(a), &[a])
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len().max(1) {
            return Err(Error::invalid("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let len = shape.get(axis).copied().unwrap_or(1);
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape.get(axis + 1..).map_or(1, |s| s.iter().product());
        let src = t.values();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        self.push(
            "softmax",
            Tensor::new(shape, out)?,
            Op::Softmax { x, outer, len, inner },
            &[x],
        )
    }

    /// Zero-mean, unit-variance normalization over the last axis, no affine.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = last_dim(t);
        if n < 2 {
            return Err(Error::invalid("layer_norm", "feature dimension must exceed 1"));
        }
        let shape = t.shape().to_vec();
        let mut out = t.values().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / n);
        for row in out.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
            inv_std.push(r);
        }
        self.push(
            "layer_norm",
            Tensor::new(shape, out)?,
            Op::Normalize { x, inv_std },
            &[x],
        )
    }

    /// `x ⊙ gain + bias`, broadcasting over rows.
    pub fn affine(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>) -> Result<Var> {
        let n = last_dim(self.value(x));
        for p in [gain, bias].into_iter().flatten() {
            if self.value(p).len() != n {
                return Err(Error::shape("affine", self.value(x).shape(), self.value(p).shape()));
            }
        }
        let mut out = self.value(x).values().to_vec();
        if let Some(g) = gain {
            let g = self.value(g).values();
            for row in out.chunks_mut(n) {
                row.iter_mut().zip(g).for_each(|(v, s)| *v *= s);
            }
        }
        if let Some(b) = bias {
            let b = self.value(b).values();
            for row in out.chunks_mut(n) {
                add_into(row, b);
            }
        }
        let shape = self.value(x).shape().to_vec();
        let inputs: Vec<Var> = std::iter::once(x).chain(gain).chain(bias).collect();
        self.push(
            "affine",
            Tensor::new(shape, out)?,
            Op::Affine { x, gain, bias },
            &inputs,
        )
    }

    /// Layer normalization over the last axis with optional gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>) -> Result<Var> {
        let n = self.normalize(x)?;
        if gain.is_none() && bias.is_none() {
            return Ok(n);
        }
        self.affine(n, gain, bias)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::invalid("gather_rows", format!("row {bad} out of {m}")));
        }
        let src = self.value(x).values();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        self.push(
            "gather_rows",
            Tensor::new(vec![idx.len(), n], out)?,
            Op::GatherRows { x, idx: idx.to_vec() },
            &[x],
        )
    }

    /// Returns a `rows×n` matrix whose row `idx[r]` accumulates row `r` of `x`.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "scatter_add_rows")?;
        if idx.len() != m {
            return Err(Error::shape("scatter_add_rows", self.value(x).shape(), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid("scatter_add_rows", format!("row {bad} out of {rows}")));
        }
        let src = self.value(x).values();
        let mut out = vec![0.0; rows * n];
        for (r, &i) in idx.iter().enumerate() {
            add_into(&mut out[i * n..(i + 1) * n], &src[r * n..(r + 1) * n]);
        }
        self.push(
            "scatter_add_rows",
            Tensor::new(vec![rows, n], out)?,
            Op::ScatterAddRows { x, idx: idx.to_vec() },
            &[x],
        )
    }

    /// Gate weights of the selected experts: a `K×k` matrix whose entry
    /// `(t, s)` is `probs[t, selected[t][s]]`, optionally divided by the
    /// row's selected sum.
    pub fn gates(&mut self, probs: Var, selected: &[Vec<usize>], renormalize: bool) -> Result<Var> {
        let (rows, e) = dims2(self.value(probs), "gates")?;
        if selected.len() != rows {
            return Err(Error::shape("gates", self.value(probs).shape(), &[selected.len()]));
        }
        let k = selected.first().map_or(0, Vec::len);
        if selected.iter().any(|s| s.len() != k || s.iter().any(|&i| i >= e)) {
            return Err(Error::invalid("gates", "ragged or out-of-range selection"));
        }
        let p = self.value(probs).values();
        let mut out = Vec::with_capacity(rows * k);
        for (t, sel) in selected.iter().enumerate() {
            let row = &p[t * e..(t + 1) * e];
            let denom = if renormalize {
                sel.iter().map(|&i| row[i]).sum::<f64>()
            } else {
                1.0
            };
            out.extend(sel.iter().map(|&i| row[i] / denom));
        }
        self.push(
            "gates",
            Tensor::new(vec![rows, k], out)?,
            Op::Gates {
                probs,
                selected: selected.to_vec(),
                renormalize,
            },
            &[probs],
        )
    }

    /// Multiplies row `i` of `x` by `s[i]`; `s` holds one value per row.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(x), "scale_rows")?;
        if self.value(s).len() != m {
            return Err(Error::shape("scale_rows", self.value(x).shape(), self.value(s).shape()));
        }
        let sv = self.value(s).values();
        let mut out = self.value(x).values().to_vec();
        for (row, &c) in out.chunks_mut(n).zip(sv) {
            row.iter_mut().for_each(|v| *v *= c);
        }
        self.push(
            "scale_rows",
            Tensor::new(vec![m, n], out)?,
            Op::ScaleRows { x, s },
            &[x, s],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows", "no inputs"))?;
        let (_, n) = dims2(self.value(first), "concat_rows")?;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (r, c) = dims2(self.value(p), "concat_rows")?;
            if c != n {
                return Err(Error::shape(
                    "concat_rows",
                    self.value(first).shape(),
                    self.value(p).shape(),
                ));
            }
            out.extend_from_slice(self.value(p).values());
            m += r;
        }
        self.push(
            "concat_rows",
            Tensor::new(vec![m, n], out)?,
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    /// Multi-head causal scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `(B·T)×D` with `B` sequences of `seq_len` rows each;
    /// head `h` owns columns `h·D/heads .. (h+1)·D/heads`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Result<Var> {
        let (rows, d) = dims2(self.value(q), "causal_attention")?;
        for other in [k, v] {
            if self.value(other).shape() != self.value(q).shape() {
                return Err(Error::shape(
                    "causal_attention",
                    self.value(q).shape(),
                    self.value(other).shape(),
                ));
            }
        }
        if seq_len == 0 || rows % seq_len != 0 || heads == 0 || d % heads != 0 {
            return Err(Error::invalid(
                "causal_attention",
                format!("rows {rows}, seq_len {seq_len}, width {d}, heads {heads}"),
            ));
        }
        let (qv, kv, vv) = (self.value(q).values(), self.value(k).values(), self.value(v).values());
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let batch = rows / seq_len;
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; batch * heads * seq_len * seq_len];
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * seq_len * seq_len;
                for i in 0..seq_len {
                    let qi = &qv[(b * seq_len + i) * d + h * dh..][..dh];
                    let prow = &mut probs[pbase + i * seq_len..pbase + (i + 1) * seq_len];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &kv[(b * seq_len + j) * d + h * dh..][..dh];
                        let s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                        prow[j] = s;
                        max = max.max(s);
                    }
                    let mut sum = 0.0;
                    for p in prow.iter_mut().take(i + 1) {
                        *p = (*p - max).exp();
                        sum += *p;
                    }
                    for p in prow.iter_mut().take(i + 1) {
                        *p /= sum;
                    }
                    let orow = &mut out[(b * seq_len + i) * d + h * dh..][..dh];
                    for (j, &p) in prow.iter().enumerate().take(i + 1) {
                        let vj = &vv[(b * seq_len + j) * d + h * dh..][..dh];
                        orow.iter_mut().zip(vj).for_each(|(o, x)| *o += p * x);
                    }
                }
            }
        }
        self.push(
            "causal_attention",
            Tensor::new(vec![rows, d], out)?,
            Op::CausalAttention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Weighted negative log-likelihood `Σ w·(logsumexp(row) − row[target])`
    /// over the listed `(row, target, weight)` triples.
    pub fn cross_entropy(&mut self, logits: Var, rows: &[(usize, usize, f64)]) -> Result<Var> {
        let (m, v) = dims2(self.value(logits), "cross_entropy")?;
        if rows.iter().any(|&(r, t, _)| r >= m || t >= v) {
            return Err(Error::invalid("cross_entropy", "row or target out of range"));
        }
        let src = self.value(logits).values();
        let mut softmax = Vec::with_capacity(rows.len() * v);
        let mut total = 0.0;
        for &(r, t, w) in rows {
            let row = &src[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            total += w * (lse - row[t]);
            softmax.extend(row.iter().map(|x| (x - lse).exp()));
        }
        self.push(
            "cross_entropy",
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                rows: rows.to_vec(),
                softmax,
            },
            &[logits],
        )
    }

    /// `Σ weights ⊙ x` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::shape("weighted_sum", self.value(x).shape(), &[weights.len()]));
        }
        let s = self.value(x).values().iter().zip(&weights).map(|(a, b)| a * b).sum();
        self.push("weighted_sum", Tensor::scalar(s), Op::WeightedSum { x, weights }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).values().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Linear combination `Σ cᵢ·sᵢ` of scalar vars.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, c) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::shape("combine", self.value(v).shape(), &[1]));
            }
            s += c * self.value(v).item();
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push("combine", Tensor::scalar(s), Op::Combine(terms.to_vec()), &inputs)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        if let Some((i, _)) = grads
            .iter()
            .enumerate()
            .find(|(_, g)| g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
        {
            return Err(Error::NonFinite {
                op: format!("backward at node {i}"),
            });
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.value(*a), "matmul")?;
                let n = self.value(*b).shape()[1];
                if self.wants(*a) {
                    let mut tmp = vec![0.0; m * k];
                    kernels::matmul_nt(g, self.value(*b).values(), m, n, k, &mut tmp);
                    add_into(slot(grads, *a, m * k), &tmp);
                }
                if self.wants(*b) {
                    let av = self.value(*a).values();
                    kernels::matmul_tn_acc(av, g, m, k, n, slot(grads, *b, k * n));
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = dims2(self.value(*a), "matmul_nt")?;
                let n = self.value(*b).shape()[0];
                if self.wants(*a) {
                    let mut tmp = vec![0.0; m * k];
                    kernels::matmul(g, self.value(*b).values(), m, n, k, &mut tmp);
                    add_into(slot(grads, *a, m * k), &tmp);
                }
                if self.wants(*b) {
                    let av = self.value(*a).values();
                    kernels::matmul_tn_acc(g, av, m, n, k, slot(grads, *b, n * k));
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    let (m, n) = dims2(self.value(*a), "transpose")?;
                    let dst = slot(grads, *a, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            dst[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if self.wants(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if self.wants(*bias) {
                    let n = self.value(*bias).len();
                    let dst = slot(grads, *bias, n);
                    for row in g.chunks(n) {
                        add_into(dst, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).values(), self.value(*b).values());
                if self.wants(*a) {
                    let dst = slot(grads, *a, g.len());
                    for ((d, gi), y) in dst.iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                }
                if self.wants(*b) {
                    let dst = slot(grads, *b, g.len());
                    for ((d, gi), x) in dst.iter_mut().zip(g).zip(av) {
                        *d += gi * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    let dst = slot(grads, *a, g.len());
                    dst.iter_mut().zip(g).for_each(|(d, gi)| *d += c * gi);
                }
            }
            Op::Divide(a, c) => {
                if self.wants(*a) {
                    let dst = slot(grads, *a, g.len());
                    dst.iter_mut().zip(g).for_each(|(d, gi)| *d += gi / c);
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let xv = self.value(*a).values();
                    let dst = slot(grads, *a, g.len());
                    for ((d, gi), &x) in dst.iter_mut().zip(g).zip(xv) {
                        *d += gi * gelu_deriv(x);
                    }
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                if self.wants(*x) {
                    let y = node.value.values();
                    let dst = slot(grads, *x, g.len());
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: f64 = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..*len {
                                dst[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Normalize { x, inv_std } => {
                if self.wants(*x) {
                    let y = node.value.values();
                    let n = last_dim(&node.value);
                    let dst = slot(grads, *x, g.len());
                    for (r, &rs) in inv_std.iter().enumerate() {
                        let (gr, yr) = (&g[r * n..(r + 1) * n], &y[r * n..(r + 1) * n]);
                        let mg = gr.iter().sum::<f64>() / n as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            dst[r * n + j] += rs * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                }
            }
            Op::Affine { x, gain, bias } => {
                let n = last_dim(&node.value);
                if self.wants(*x) {
                    let dst = slot(grads, *x, g.len());
                    match gain {
                        Some(gv) => {
                            let gain_v = self.value(*gv).values();
                            for (drow, grow) in dst.chunks_mut(n).zip(g.chunks(n)) {
                                for j in 0..n {
                                    drow[j] += grow[j] * gain_v[j];
                                }
                            }
                        }
                        None => add_into(dst, g),
                    }
                }
                if let Some(gv) = gain {
                    if self.wants(*gv) {
                        let xv = self.value(*x).values();
                        let dst = slot(grads, *gv, n);
                        for (grow, xrow) in g.chunks(n).zip(xv.chunks(n)) {
                            for j in 0..n {
                                dst[j] += grow[j] * xrow[j];
                            }
                        }
                    }
                }
                if let Some(bv) = bias {
                    if self.wants(*bv) {
                        let dst = slot(grads, *bv, n);
                        for grow in g.chunks(n) {
                            add_into(dst, grow);
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if self.wants(*x) {
                    let (m, n) = dims2(self.value(*x), "gather_rows")?;
                    let dst = slot(grads, *x, m * n);
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut dst[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::ScatterAddRows { x, idx } => {
                if self.wants(*x) {
                    let (m, n) = dims2(self.value(*x), "scatter_add_rows")?;
                    let dst = slot(grads, *x, m * n);
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut dst[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                }
            }
            Op::Gates {
                probs,
                selected,
                renormalize,
            } => {
                if self.wants(*probs) {
                    let (rows, e) = dims2(self.value(*probs), "gates")?;
                    let p = self.value(*probs).values();
                    let out = node.value.values();
                    let k = selected.first().map_or(0, Vec::len);
                    let dst = slot(grads, *probs, rows * e);
                    for (t, sel) in selected.iter().enumerate() {
                        let gr = &g[t * k..(t + 1) * k];
                        if *renormalize {
                            let denom: f64 = sel.iter().map(|&i| p[t * e + i]).sum();
                            let dot: f64 = gr.iter().zip(&out[t * k..(t + 1) * k]).map(|(a, b)| a * b).sum();
                            for (s, &i) in sel.iter().enumerate() {
                                dst[t * e + i] += (gr[s] - dot) / denom;
                            }
                        } else {
                            for (s, &i) in sel.iter().enumerate() {
                                dst[t * e + i] += gr[s];
                            }
                        }
                    }
                }
            }
            Op::ScaleRows { x, s } => {
                let (m, n) = dims2(&node.value, "scale_rows")?;
                let sv = self.value(*s).values();
                if self.wants(*x) {
                    let dst = slot(grads, *x, m * n);
                    for r in 0..m {
                        for j in 0..n {
                            dst[r * n + j] += g[r * n + j] * sv[r];
                        }
                    }
                }
                if self.wants(*s) {
                    let xv = self.value(*x).values();
                    let dst = slot(grads, *s, m);
                    for r in 0..m {
                        dst[r] += g[r * n..(r + 1) * n]
                            .iter()
                            .zip(&xv[r * n..(r + 1) * n])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.wants(*p) {
                        add_into(slot(grads, *p, len), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            } => self.backprop_attention(*q, *k, *v, *seq_len, *heads, probs, g, grads)?,
            Op::CrossEntropy { logits, rows, softmax } => {
                if self.wants(*logits) {
                    let (m, v) = dims2(self.value(*logits), "cross_entropy")?;
                    let dst = slot(grads, *logits, m * v);
                    for (n, &(r, t, w)) in rows.iter().enumerate() {
                        let sm = &softmax[n * v..(n + 1) * v];
                        let drow = &mut dst[r * v..(r + 1) * v];
                        for j in 0..v {
                            drow[j] += g[0] * w * sm[j];
                        }
                        drow[t] -= g[0] * w;
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                if self.wants(*x) {
                    let dst = slot(grads, *x, weights.len());
                    dst.iter_mut().zip(weights).for_each(|(d, w)| *d += g[0] * w);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let len = self.value(*x).len();
                    slot(grads, *x, len).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Combine(terms) => {
                for &(v, c) in terms {
                    if self.wants(v) {
                        slot(grads, v, 1)[0] += c * g[0];
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let (rows, d) = dims2(self.value(q), "causal_attention")?;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let batch = rows / seq_len;
        let (qv, kv, vv) = (self.value(q).values(), self.value(k).values(), self.value(v).values());
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut ds = vec![0.0; seq_len];
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * seq_len * seq_len;
                let at = |t: usize| (b * seq_len + t) * d + h * dh;
                for i in 0..seq_len {
                    let prow = &probs[pbase + i * seq_len..pbase + (i + 1) * seq_len];
                    let go = &g[at(i)..at(i) + dh];
                    // dP_ij = dO_i · V_j ; dV_j += P_ij dO_i
                    let mut dot = 0.0;
                    for j in 0..=i {
                        let vj = &vv[at(j)..at(j) + dh];
                        let dp: f64 = go.iter().zip(vj).map(|(a, c)| a * c).sum();
                        ds[j] = dp;
                        dot += dp * prow[j];
                        let dvj = &mut dv[at(j)..at(j) + dh];
                        dvj.iter_mut().zip(go).for_each(|(x, y)| *x += prow[j] * y);
                    }
                    for j in 0..=i {
                        let s = prow[j] * (ds[j] - dot) * scale;
                        if s == 0.0 {
                            continue;
                        }
                        let (kj, qi) = (&kv[at(j)..at(j) + dh], &qv[at(i)..at(i) + dh]);
                        dq[at(i)..at(i) + dh].iter_mut().zip(kj).for_each(|(x, y)| *x += s * y);
                        dk[at(j)..at(j) + dh].iter_mut().zip(qi).for_each(|(x, y)| *x += s * y);
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if self.wants(var) {
                add_into(slot(grads, var, rows * d), &buf);
            }
        }
        Ok(())
    }
}
