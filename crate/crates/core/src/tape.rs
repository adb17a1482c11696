//! Reverse-mode differentiation over an explicit tape.
//!
//! Every op appends one node holding its forward value. `backward` walks the
//! nodes in exact reverse insertion order, so accumulation order (and hence
//! every float bit of the gradients) is a pure function of the forward trace.
//!
//! The tape also counts forward flops under the convention in [`flop_cost`],
//! which is what the analytic cost model is checked against.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Flop charges per element for the non-matmul ops. A multiply-accumulate
/// counts as two flops.
pub mod flop_cost {
    /// add, mul, scale, bias add, mean accumulation
    pub const ELEMENTWISE: u64 = 1;
    pub const SOFTMAX: u64 = 5;
    pub const LAYERNORM: u64 = 5;
    pub const GELU: u64 = 8;
    pub const RELU: u64 = 1;
    pub const MAC: u64 = 2;
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddRow(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
    MeanRows(Var),
    Reshape(Var),
    Dropout { x: Var, mask: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-threaded computation tape. Two tapes never share nodes.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    flops: u64,
}

// out[m×n] += a[m×k] · b[k×n]
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out[m×n] += a[m×k] · b[n×k]ᵀ
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * n + j] += dot;
        }
    }
}

// out[k×n] += a[m×k]ᵀ · b[m×n]
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
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

    /// Forward flops recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Clone of a node's value with its gradient slot filled in.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor {
        let mut t = self.value(v).clone();
        let req = self.requires_grad(v);
        t.set_grad(self.grad(v).map(<[f64]>::to_vec)).expect("grad length");
        t.with_requires_grad(req)
    }

    /// Records a leaf; it participates in backward iff the tensor requires grad.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let req = t.requires_grad();
        self.push(t, Op::Leaf, req, 0)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool, flops: u64) -> Var {
        value = value.with_requires_grad(requires_grad);
        self.flops += flops;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: format!("{op} expects a matrix"),
            });
        }
        Ok((s[0], s[1]))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).values(), self.value(b).values(), &mut out, m, k, n);
        let req = self.req(&[a, b]);
        let flops = flop_cost::MAC * (m * k * n) as u64;
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), req, flops))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let src = self.value(a).values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let req = self.req(&[a]);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Transpose(a), req, 0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let req = self.req(&[a, b]);
        let flops = out.len() as u64 * flop_cost::ELEMENTWISE;
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add(a, b), req, flops))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let req = self.req(&[a, b]);
        let flops = out.len() as u64 * flop_cost::ELEMENTWISE;
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mul(a, b), req, flops))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).values().iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let req = self.req(&[a]);
        let flops = out.len() as u64 * flop_cost::ELEMENTWISE;
        Ok(self.push(Tensor::new(&shape, out)?, Op::Scale(a, c), req, flops))
    }

    /// Multiplies every element of `a` by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(self.mismatch("scale_by", a, s));
        }
        let c = self.value(s).values()[0];
        let out: Vec<f64> = self.value(a).values().iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let req = self.req(&[a, s]);
        let flops = out.len() as u64 * flop_cost::ELEMENTWISE;
        Ok(self.push(Tensor::new(&shape, out)?, Op::ScaleBy(a, s), req, flops))
    }

    /// Adds a row vector (e.g. a bias) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_row")?;
        if self.value(row).numel() != n {
            return Err(self.mismatch("add_row", a, row));
        }
        let r = self.value(row).values();
        let mut out = self.value(a).values().to_vec();
        for chunk in out.chunks_mut(n) {
            for (o, &b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        let req = self.req(&[a, row]);
        let flops = (m * n) as u64 * flop_cost::ELEMENTWISE;
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::AddRow(a, row), req, flops))
    }

    /// Softmax over the last axis with max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_masked(a, false)
    }

    /// Softmax over rows of a square score matrix where entry (i, j) is
    /// excluded for j > i.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_masked(a, true)
    }

    fn softmax_masked(&mut self, a: Var, causal: bool) -> Result<Var> {
        let t = self.value(a);
        let n = *t.shape().last().unwrap();
        let rows = t.numel() / n;
        if causal && (t.shape().len() != 2 || rows != n) {
            return Err(Error::InvalidShape {
                shape: t.shape().to_vec(),
                reason: "causal softmax needs a square score matrix".into(),
            });
        }
        let mut out = vec![0.0; t.numel()];
        for (r, (src, dst)) in t.values().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let live = if causal { r + 1 } else { n };
            let max = src[..live].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (d, &s) in dst[..live].iter_mut().zip(&src[..live]) {
                *d = (s - max).exp();
                total += *d;
            }
            for d in &mut dst[..live] {
                *d /= total;
            }
        }
        let shape = t.shape().to_vec();
        let req = self.req(&[a]);
        let flops = out.len() as u64 * flop_cost::SOFTMAX;
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax(a), req, flops))
    }

    /// Per-row normalization over the last axis followed by `gamma * x + beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        if self.value(gamma).numel() != d {
            return Err(self.mismatch("layernorm", x, gamma));
        }
        if self.value(beta).numel() != d {
            return Err(self.mismatch("layernorm", x, beta));
        }
        let g = self.value(gamma).values();
        let b = self.value(beta).values();
        let rows = t.numel() / d;
        let mut xhat = vec![0.0; t.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let src = &t.values()[r * d..(r + 1) * d];
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let xh = (src[j] - mean) * inv;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + b[j];
            }
        }
        let shape = t.shape().to_vec();
        let req = self.req(&[x, gamma, beta]);
        let flops = out.len() as u64 * flop_cost::LAYERNORM;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push(Tensor::new(&shape, out)?, op, req, flops))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(a).values().iter().map(|&x| gelu_parts(x).0).collect();
        let shape = self.shape(a).to_vec();
        let req = self.req(&[a]);
        let flops = out.len() as u64 * flop_cost::GELU;
        Ok(self.push(Tensor::new(&shape, out)?, Op::Gelu(a), req, flops))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(a).values().iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let req = self.req(&[a]);
        let flops = out.len() as u64 * flop_cost::RELU;
        Ok(self.push(Tensor::new(&shape, out)?, Op::Relu(a), req, flops))
    }

    /// Channel-axis concatenation of equal-length matrices.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::InvalidShape {
            shape: vec![],
            reason: "concat of nothing".into(),
        })?;
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_cols")?;
            if pm != m {
                return Err(self.mismatch("concat_cols", first, p));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).values()[i * w..(i + 1) * w]);
            }
        }
        let req = self.req(parts);
        Ok(self.push(Tensor::new(&[m, total], out)?, Op::ConcatCols(parts.to_vec()), req, 0))
    }

    /// Token-axis concatenation of equal-width matrices.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::InvalidShape {
            shape: vec![],
            reason: "concat of nothing".into(),
        })?;
        let (_, n) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_rows")?;
            if pn != n {
                return Err(self.mismatch("concat_rows", first, p));
            }
            rows += pm;
        }
        let mut out = Vec::with_capacity(rows * n);
        for &p in parts {
            out.extend_from_slice(self.value(p).values());
        }
        let req = self.req(parts);
        Ok(self.push(Tensor::new(&[rows, n], out)?, Op::ConcatRows(parts.to_vec()), req, 0))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::InvalidShape {
                shape: vec![m, n],
                reason: format!("column slice {start}..{} out of range", start + len),
            });
        }
        let src = self.value(x).values();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let req = self.req(&[x]);
        Ok(self.push(Tensor::new(&[m, len], out)?, Op::SliceCols { x, start }, req, 0))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(Error::InvalidShape {
                shape: vec![m, n],
                reason: format!("row slice {start}..{} out of range", start + len),
            });
        }
        let out = self.value(x).values()[start * n..(start + len) * n].to_vec();
        let req = self.req(&[x]);
        Ok(self.push(Tensor::new(&[len, n], out)?, Op::SliceRows { x, start }, req, 0))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::InvalidShape {
                shape: vec![0, d],
                reason: "embedding lookup of zero ids".into(),
            });
        }
        let src = self.value(table).values();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::UnknownToken { id, vocab });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let req = self.req(&[table]);
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(Tensor::new(&[ids.len(), d], out)?, op, req, 0))
    }

    /// Mean token-level cross-entropy of `logits[T×V]` against `targets[T]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (t, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != t {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: vec![t, v],
                right: vec![targets.len()],
            });
        }
        let src = self.value(logits).values();
        let mut probs = vec![0.0; t * v];
        let mut loss = 0.0;
        for (r, &target) in targets.iter().enumerate() {
            if target >= v {
                return Err(Error::UnknownToken { id: target, vocab: v });
            }
            let row = &src[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|z| (z - max).exp()).sum();
            let lse = max + total.ln();
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
            loss += lse - row[target];
        }
        loss /= t as f64;
        let req = self.req(&[logits]);
        let flops = (t * v) as u64 * flop_cost::SOFTMAX;
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, req, flops))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let req = self.req(&[a]);
        let flops = self.value(a).numel() as u64 * flop_cost::ELEMENTWISE;
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), req, flops))
    }

    /// Mean over the token axis: `[m×n] -> [1×n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "mean_rows")?;
        let mut out = vec![0.0; n];
        for row in self.value(a).values().chunks(n) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let req = self.req(&[a]);
        let flops = (m * n) as u64 * flop_cost::ELEMENTWISE;
        Ok(self.push(Tensor::new(&[1, n], out)?, Op::MeanRows(a), req, flops))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let req = self.req(&[a]);
        Ok(self.push(t, Op::Reshape(a), req, 0))
    }

    /// Multiplies by a precomputed keep-mask (entries 0 or 1/(1-p)).
    pub fn dropout(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(a).numel() {
            return Err(Error::ShapeMismatch {
                op: "dropout",
                left: self.shape(a).to_vec(),
                right: vec![mask.len()],
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let shape = self.shape(a).to_vec();
        let req = self.req(&[a]);
        let flops = out.len() as u64 * flop_cost::ELEMENTWISE;
        Ok(self.push(Tensor::new(&shape, out)?, Op::Dropout { x: a, mask }, req, flops))
    }

    /// Populates gradients of `loss` for every node that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn grad_slot(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn accumulate(&mut self, v: Var, contrib: impl IntoIterator<Item = f64>) {
        if let Some(g) = self.grad_slot(v) {
            for (gi, c) in g.iter_mut().zip(contrib) {
                *gi += c;
            }
        }
    }

    fn backprop_node(&mut self, i: usize, gout: &[f64]) {
        // Ops whose backward needs only input values are handled by
        // temporarily taking the op out of the node.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let bv = self.nodes[b.0].value.values().to_vec();
                    let g = self.grad_slot(*a).unwrap();
                    gemm_nt(gout, &bv, g, m, n, k);
                }
                if self.requires_grad(*b) {
                    let av = self.nodes[a.0].value.values().to_vec();
                    let g = self.grad_slot(*b).unwrap();
                    gemm_tn(&av, gout, g, m, k, n);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                if let Some(g) = self.grad_slot(*a) {
                    for r in 0..m {
                        for c in 0..n {
                            g[r * n + c] += gout[c * m + r];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, gout.iter().copied());
                self.accumulate(*b, gout.iter().copied());
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let bv = self.nodes[b.0].value.values().to_vec();
                    self.accumulate(*a, gout.iter().zip(&bv).map(|(g, y)| g * y));
                }
                if self.requires_grad(*b) {
                    let av = self.nodes[a.0].value.values().to_vec();
                    self.accumulate(*b, gout.iter().zip(&av).map(|(g, x)| g * x));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(*a, gout.iter().map(|g| g * c));
            }
            Op::ScaleBy(a, s) => {
                let c = self.nodes[s.0].value.values()[0];
                if self.requires_grad(*s) {
                    let dot: f64 = gout
                        .iter()
                        .zip(self.nodes[a.0].value.values())
                        .map(|(g, x)| g * x)
                        .sum();
                    self.accumulate(*s, [dot]);
                }
                self.accumulate(*a, gout.iter().map(|g| g * c));
            }
            Op::AddRow(a, row) => {
                self.accumulate(*a, gout.iter().copied());
                let n = self.nodes[row.0].value.numel();
                if let Some(g) = self.grad_slot(*row) {
                    for chunk in gout.chunks(n) {
                        for (gi, &c) in g.iter_mut().zip(chunk) {
                            *gi += c;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let y = self.nodes[i].value.values().to_vec();
                let n = *self.nodes[i].value.shape().last().unwrap();
                if let Some(g) = self.grad_slot(*a) {
                    for ((gr, yr), dr) in g.chunks_mut(n).zip(y.chunks(n)).zip(gout.chunks(n)) {
                        let dot: f64 = yr.iter().zip(dr).map(|(y, d)| y * d).sum();
                        for j in 0..n {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.nodes[gamma.0].value.numel();
                if let Some(g) = self.grad_slot(*gamma) {
                    for (dr, xr) in gout.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            g[j] += dr[j] * xr[j];
                        }
                    }
                }
                if let Some(g) = self.grad_slot(*beta) {
                    for dr in gout.chunks(d) {
                        for j in 0..d {
                            g[j] += dr[j];
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let gam = self.nodes[gamma.0].value.values().to_vec();
                    let g = self.grad_slot(*x).unwrap();
                    let df = d as f64;
                    for (r, ((gr, dr), xr)) in g
                        .chunks_mut(d)
                        .zip(gout.chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = dr[j] * gam[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xr[j];
                        }
                        let inv = inv_std[r];
                        for j in 0..d {
                            let dxh = dr[j] * gam[j];
                            gr[j] += inv / df * (df * dxh - sum_dxh - xr[j] * sum_dxh_xh);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if self.requires_grad(*a) {
                    let xs = self.nodes[a.0].value.values().to_vec();
                    self.accumulate(*a, gout.iter().zip(&xs).map(|(g, &x)| g * gelu_parts(x).1));
                }
            }
            Op::Relu(a) => {
                if self.requires_grad(*a) {
                    let xs = self.nodes[a.0].value.values().to_vec();
                    self.accumulate(
                        *a,
                        gout.iter()
                            .zip(&xs)
                            .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }),
                    );
                }
            }
            Op::ConcatCols(parts) => {
                let m = self.nodes[i].value.shape()[0];
                let total = self.nodes[i].value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if let Some(g) = self.grad_slot(p) {
                        for r in 0..m {
                            let src = &gout[r * total + offset..r * total + offset + w];
                            for (gi, &s) in g[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *gi += s;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    self.accumulate(p, gout[offset..offset + len].iter().copied());
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let n = self.shape(*x)[1];
                let w = self.nodes[i].value.shape()[1];
                let start = *start;
                if let Some(g) = self.grad_slot(*x) {
                    for (r, src) in gout.chunks(w).enumerate() {
                        for (gi, &s) in g[r * n + start..r * n + start + w].iter_mut().zip(src) {
                            *gi += s;
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let n = self.shape(*x)[1];
                let start = *start;
                if let Some(g) = self.grad_slot(*x) {
                    for (gi, &s) in g[start * n..start * n + gout.len()].iter_mut().zip(gout) {
                        *gi += s;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(g) = self.grad_slot(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            g[id * d + j] += gout[r * d + j];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.shape(*logits)[1];
                let scale = gout[0] / targets.len() as f64;
                if let Some(g) = self.grad_slot(*logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            g[r * v + j] += scale * (probs[r * v + j] - onehot);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let g0 = gout[0];
                let n = self.nodes[a.0].value.numel();
                self.accumulate(*a, std::iter::repeat(g0).take(n));
            }
            Op::MeanRows(a) => {
                let m = self.shape(*a)[0];
                let n = self.shape(*a)[1];
                if let Some(g) = self.grad_slot(*a) {
                    for row in g.chunks_mut(n) {
                        for (gi, &s) in row.iter_mut().zip(gout) {
                            *gi += s / m as f64;
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                self.accumulate(*a, gout.iter().copied());
            }
            Op::Dropout { x, mask } => {
                self.accumulate(*x, gout.iter().zip(mask).map(|(g, m)| g * m));
            }
        }
        self.nodes[i].op = op;
    }
}
