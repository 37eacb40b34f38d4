//! Eager operation tape with reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh per forward pass. Parameters are leafed in via
//! [`Tape::param`] (memoized per tape), constants via [`Tape::constant`].
//! [`Tape::backward`] walks the recorded ops in reverse and accumulates
//! gradients into the owning [`Params`] registry; repeated calls without
//! clearing accumulate, and parameters the loss does not reach end up with
//! exact zero gradients.
//!
//! Broadcasting is restricted to leading unit dimensions (a `[1, n]` bias
//! against an `[m, n]` activation); everything else must match exactly.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::tensor::{ParamId, Params, Real, Tensor};
use super::{NumericsError, Result};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Attention masking mode for [`Tape::masked_softmax`].
#[derive(Clone, Debug)]
pub enum AttnMask {
    /// Column `j` participates iff `keys[j]`. Masked columns are exactly 0
    /// after the softmax.
    Keys(Arc<Vec<bool>>),
    /// Row `i` may attend to columns `0..=i`.
    Causal,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Relu { a: usize },
    Gelu { a: usize },
    Sigmoid { a: usize },
    Softmax { a: usize, axis: usize },
    MaskedSoftmax { a: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    CrossEntropy { logits: usize, targets: Arc<Vec<u32>>, ignore_id: Option<u32> },
    Bce { pred: usize, target: f64 },
    Embedding { table: usize, ids: Arc<Vec<u32>> },
    ConcatRows { parts: Arc<Vec<usize>> },
    ConcatCols { parts: Arc<Vec<usize>> },
    SliceRows { a: usize, start: usize },
    SliceCols { a: usize, start: usize },
    Reshape { a: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
}

struct Node<R: Real> {
    shape: Vec<usize>,
    data: Vec<R>,
    op: Op,
    needs_grad: bool,
    /// Set when the node is a parameter leaf.
    param: Option<ParamId>,
}

/// Recorded computation over one forward pass.
pub struct Tape<R: Real> {
    nodes: Vec<Node<R>>,
    param_vars: BTreeMap<ParamId, Var>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => panic!("expected rank <= 2, got {shape:?}"),
    }
}

/// c[m,n] += a[m,k] @ b[k,n], row-major saxpy form.
fn matmul_acc<R: Real>(c: &mut [R], a: &[R], b: &[R], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == R::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// c[m,k] += g[m,n] @ b[k,n]^T (dot-product form).
fn matmul_nt_acc<R: Real>(c: &mut [R], g: &[R], b: &[R], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = R::zero();
            for j in 0..n {
                s += grow[j] * brow[j];
            }
            c[i * k + p] += s;
        }
    }
}

/// c[k,n] += a[m,k]^T @ g[m,n] (saxpy form).
fn matmul_tn_acc<R: Real>(c: &mut [R], a: &[R], g: &[R], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == R::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * grow[j];
            }
        }
    }
}

fn gelu_forward<R: Real>(x: R) -> R {
    let xf = x.as_f64();
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = c * (xf + 0.044715 * xf * xf * xf);
    R::from_f64(0.5 * xf * (1.0 + inner.tanh()))
}

fn gelu_grad(xf: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = c * (xf + 0.044715 * xf * xf * xf);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = c * (1.0 + 3.0 * 0.044715 * xf * xf);
    0.5 * (1.0 + t) + 0.5 * xf * sech2 * d_inner
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<R>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[R] {
        &self.nodes[v.0].data
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    /// Scalar value of a 1-element node.
    pub fn scalar_value(&self, v: Var) -> R {
        debug_assert_eq!(self.numel(v), 1);
        self.nodes[v.0].data[0]
    }

    pub fn value(&self, v: Var) -> Tensor<R> {
        Tensor::new(self.shape(v).to_vec(), self.data(v).to_vec()).expect("node is consistent")
    }

    /// Leafs a parameter into the tape, memoized per `ParamId`.
    pub fn param(&mut self, params: &Params<R>, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let t = &params.get(id).tensor;
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        self.param_vars.insert(id, v);
        v
    }

    pub fn constant(&mut self, t: &Tensor<R>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<R>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::ShapeDataMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    // ── forward ops ────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rows_cols(self.shape(a));
        let (k2, n) = rows_cols(self.shape(b));
        if self.shape(a).len() != 2 || self.shape(b).len() != 2 || k != k2 {
            return Err(NumericsError::DimMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut data = vec![R::zero(); m * n];
        matmul_acc(&mut data, self.data(a), self.data(b), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], data, Op::Matmul { a: a.0, b: b.0 }, needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(NumericsError::DimMismatch {
                op: "transpose",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (m, n) = (shape[0], shape[1]);
        let src = self.data(a);
        let mut data = vec![R::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(vec![n, m], data, Op::Transpose { a: a.0 }, needs))
    }

    /// True when `b` broadcasts against `a` by leading unit dimensions only.
    fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
        if a == b {
            return true;
        }
        // b must equal a trailing suffix of a, with any extra leading dims = 1.
        let b_trim: Vec<usize> = b.iter().copied().skip_while(|&d| d == 1).collect();
        if b_trim.len() > a.len() {
            return false;
        }
        a[a.len() - b_trim.len()..] == b_trim[..]
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(R, R) -> R,
        make: impl Fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(b).to_vec();
        if !Self::broadcast_ok(&ashape, &bshape) {
            return Err(NumericsError::DimMismatch {
                op: op_name,
                lhs: ashape,
                rhs: bshape,
            });
        }
        let bn = self.numel(b);
        let adata = &self.nodes[a.0].data;
        let bdata = &self.nodes[b.0].data;
        let data: Vec<R> = adata
            .iter()
            .enumerate()
            .map(|(i, &av)| f(av, bdata[i % bn]))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(ashape, data, make(a.0, b.0), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cv = R::from_f64(c);
        let data: Vec<R> = self.data(a).iter().map(|&x| x * cv).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(shape, data, Op::Scale { a: a.0, c }, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data: Vec<R> = self
            .data(a)
            .iter()
            .map(|&x| if x > R::zero() { x } else { R::zero() })
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(shape, data, Op::Relu { a: a.0 }, needs)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data: Vec<R> = self.data(a).iter().map(|&x| gelu_forward(x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(shape, data, Op::Gelu { a: a.0 }, needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data: Vec<R> = self
            .data(a)
            .iter()
            .map(|&x| R::from_f64(1.0 / (1.0 + (-x.as_f64()).exp())))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(shape, data, Op::Sigmoid { a: a.0 }, needs)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(NumericsError::InvalidAxis {
                op: "softmax",
                axis,
                shape,
            });
        }
        let axis_len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(a);
        let mut data = vec![R::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |t: usize| o * axis_len * inner + t * inner + i;
                let mut max = f64::NEG_INFINITY;
                for t in 0..axis_len {
                    max = max.max(src[idx(t)].as_f64());
                }
                let mut denom = 0.0;
                for t in 0..axis_len {
                    let e = (src[idx(t)].as_f64() - max).exp();
                    data[idx(t)] = R::from_f64(e);
                    denom += e;
                }
                for t in 0..axis_len {
                    data[idx(t)] = R::from_f64(data[idx(t)].as_f64() / denom);
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(shape, data, Op::Softmax { a: a.0, axis }, needs))
    }

    /// Row-wise softmax over a `[rows, cols]` score matrix with masked
    /// columns carrying exactly zero weight. A fully masked row is all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: AttnMask) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(NumericsError::DimMismatch {
                op: "masked_softmax",
                lhs: shape,
                rhs: vec![],
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        if let AttnMask::Keys(keys) = &mask {
            if keys.len() != cols {
                return Err(NumericsError::DimMismatch {
                    op: "masked_softmax",
                    lhs: shape,
                    rhs: vec![keys.len()],
                });
            }
        }
        let src = self.data(a);
        let mut data = vec![R::zero(); src.len()];
        for r in 0..rows {
            let valid = |c: usize| match &mask {
                AttnMask::Keys(keys) => keys[c],
                AttnMask::Causal => c <= r,
            };
            let mut max = f64::NEG_INFINITY;
            for c in 0..cols {
                if valid(c) {
                    max = max.max(src[r * cols + c].as_f64());
                }
            }
            if max == f64::NEG_INFINITY {
                continue; // fully masked row stays zero
            }
            let mut denom = 0.0;
            for c in 0..cols {
                if valid(c) {
                    let e = (src[r * cols + c].as_f64() - max).exp();
                    data[r * cols + c] = R::from_f64(e);
                    denom += e;
                }
            }
            for c in 0..cols {
                if valid(c) {
                    data[r * cols + c] = R::from_f64(data[r * cols + c].as_f64() / denom);
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(shape, data, Op::MaskedSoftmax { a: a.0 }, needs))
    }

    /// Per-row layer normalization over the last dimension with affine
    /// gamma/beta of length `d`. Population variance, `eps` inside the sqrt.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 || self.numel(gamma) != d || self.numel(beta) != d {
            return Err(NumericsError::DimMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let src = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let rows = src.len() / d;
        let mut data = vec![R::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|v| (v.as_f64() - mean).powi(2))
                .sum::<f64>()
                / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                let xhat = (row[j].as_f64() - mean) * inv_std;
                data[r * d + j] = R::from_f64(xhat * g[j].as_f64() + b[j].as_f64());
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            shape,
            data,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
            needs,
        ))
    }

    /// Mean negative log-likelihood of `targets` under `logits[T, V]`,
    /// skipping positions equal to `ignore_id`. All-ignored input yields a
    /// zero loss with zero gradients.
    pub fn cross_entropy_logits(
        &mut self,
        logits: Var,
        targets: &[u32],
        ignore_id: Option<u32>,
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(NumericsError::DimMismatch {
                op: "cross_entropy_logits",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        let vocab = shape[1];
        let src = self.data(logits);
        let mut total = 0.0;
        let mut count = 0usize;
        for (t, &tgt) in targets.iter().enumerate() {
            if Some(tgt) == ignore_id {
                continue;
            }
            if tgt as usize >= vocab {
                return Err(NumericsError::TargetOutOfRange { id: tgt, vocab });
            }
            let row = &src[t * vocab..(t + 1) * vocab];
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = row
                .iter()
                .map(|v| (v.as_f64() - max).exp())
                .sum::<f64>()
                .ln()
                + max;
            total += lse - row[tgt as usize].as_f64();
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let needs = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![R::from_f64(loss)],
            Op::CrossEntropy {
                logits: logits.0,
                targets: Arc::new(targets.to_vec()),
                ignore_id,
            },
            needs,
        ))
    }

    /// Binary cross-entropy of a scalar prediction against a 0/1 target.
    /// The prediction is clamped to `[1e-7, 1 - 1e-7]` before the logs.
    pub fn bce(&mut self, pred: Var, target: f64) -> Result<Var> {
        if self.numel(pred) != 1 {
            return Err(NumericsError::NotScalar {
                op: "bce",
                shape: self.shape(pred).to_vec(),
            });
        }
        let p = self.data(pred)[0].as_f64().clamp(1e-7, 1.0 - 1e-7);
        let loss = -(target * p.ln() + (1.0 - target) * (1.0 - p).ln());
        let needs = self.needs(pred);
        Ok(self.push(
            vec![1],
            vec![R::from_f64(loss)],
            Op::Bce {
                pred: pred.0,
                target,
            },
            needs,
        ))
    }

    /// Gathers rows of `table[V, d]` at `ids`, producing `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tshape = self.shape(table).to_vec();
        if tshape.len() != 2 {
            return Err(NumericsError::DimMismatch {
                op: "embedding",
                lhs: tshape,
                rhs: vec![],
            });
        }
        let (rows, d) = (tshape[0], tshape[1]);
        let src = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= rows {
                return Err(NumericsError::EmbeddingOutOfRange { id, rows });
            }
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            vec![ids.len(), d],
            data,
            Op::Embedding {
                table: table.0,
                ids: Arc::new(ids.to_vec()),
            },
            needs,
        ))
    }

    /// Vertically stacks `[r_i, d]` parts into `[sum r_i, d]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumericsError::Contract("concat_rows of zero parts".into()));
        }
        let d = rows_cols(self.shape(parts[0])).1;
        let mut rows = 0;
        let mut data = Vec::new();
        let mut needs = false;
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p));
            if c != d {
                return Err(NumericsError::DimMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
            needs |= self.needs(p);
            data.extend_from_slice(self.data(p));
        }
        let ids = Arc::new(parts.iter().map(|v| v.0).collect::<Vec<_>>());
        Ok(self.push(vec![rows, d], data, Op::ConcatRows { parts: ids }, needs))
    }

    /// Horizontally stacks `[r, c_i]` parts into `[r, sum c_i]`.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumericsError::Contract("concat_cols of zero parts".into()));
        }
        let rows = rows_cols(self.shape(parts[0])).0;
        let mut total_cols = 0;
        let mut needs = false;
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p));
            if r != rows {
                return Err(NumericsError::DimMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            total_cols += c;
            needs |= self.needs(p);
        }
        let mut data = vec![R::zero(); rows * total_cols];
        let mut col_off = 0;
        for &p in parts {
            let (_, c) = rows_cols(self.shape(p));
            let src = self.data(p);
            for r in 0..rows {
                data[r * total_cols + col_off..r * total_cols + col_off + c]
                    .copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            col_off += c;
        }
        let ids = Arc::new(parts.iter().map(|v| v.0).collect::<Vec<_>>());
        Ok(self.push(
            vec![rows, total_cols],
            data,
            Op::ConcatCols { parts: ids },
            needs,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(a));
        if start + len > rows {
            return Err(NumericsError::Contract(format!(
                "slice_rows {start}..{} out of {rows} rows",
                start + len
            )));
        }
        let data = self.data(a)[start * cols..(start + len) * cols].to_vec();
        let needs = self.needs(a);
        Ok(self.push(vec![len, cols], data, Op::SliceRows { a: a.0, start }, needs))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(a));
        if start + len > cols {
            return Err(NumericsError::Contract(format!(
                "slice_cols {start}..{} out of {cols} cols",
                start + len
            )));
        }
        let src = self.data(a);
        let mut data = vec![R::zero(); rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let needs = self.needs(a);
        Ok(self.push(vec![rows, len], data, Op::SliceCols { a: a.0, start }, needs))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.numel(a) {
            return Err(NumericsError::ShapeDataMismatch {
                shape,
                len: self.numel(a),
            });
        }
        let data = self.data(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(shape, data, Op::Reshape { a: a.0 }, needs))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().fold(R::zero(), |acc, &v| acc + v);
        let needs = self.needs(a);
        self.push(vec![1], vec![s], Op::SumAll { a: a.0 }, needs)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.numel(a);
        let s = self.data(a).iter().fold(R::zero(), |acc, &v| acc + v);
        let needs = self.needs(a);
        self.push(
            vec![1],
            vec![s / R::from_f64(n as f64)],
            Op::MeanAll { a: a.0 },
            needs,
        )
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Computes `d loss / d param` for every parameter leaf on this tape.
    /// Returns gradients keyed by parameter id; parameters not on the tape
    /// are simply absent (the caller zero-fills).
    pub fn backward_collect(&self, loss: Var) -> Result<Vec<(ParamId, Vec<R>)>> {
        if self.numel(loss) != 1 {
            return Err(NumericsError::NotScalar {
                op: "backward",
                shape: self.shape(loss).to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<R>>> = vec![None; n];
        grads[loss.0] = Some(vec![R::one()]);

        fn acc<R: Real>(slot: &mut Option<Vec<R>>, len: usize) -> &mut Vec<R> {
            slot.get_or_insert_with(|| vec![R::zero(); len])
        }

        for i in (0..n).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g); // keep for param extraction
                }
                Op::Matmul { a, b } => {
                    let (m, k) = rows_cols(&self.nodes[*a].shape);
                    let (_, nn) = rows_cols(&self.nodes[*b].shape);
                    if self.nodes[*a].needs_grad {
                        let slot = acc(&mut grads[*a], m * k);
                        matmul_nt_acc(slot, &g, &self.nodes[*b].data, m, nn, k);
                    }
                    if self.nodes[*b].needs_grad {
                        let slot = acc(&mut grads[*b], k * nn);
                        matmul_tn_acc(slot, &self.nodes[*a].data, &g, m, k, nn);
                    }
                }
                Op::Transpose { a } => {
                    if self.nodes[*a].needs_grad {
                        let (m, nn) = rows_cols(&self.nodes[*a].shape);
                        let slot = acc(&mut grads[*a], m * nn);
                        for r in 0..m {
                            for c in 0..nn {
                                slot[r * nn + c] += g[c * m + r];
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    if self.nodes[*a].needs_grad {
                        let slot = acc(&mut grads[*a], self.nodes[*a].data.len());
                        for (s, gv) in slot.iter_mut().zip(&g) {
                            *s += *gv;
                        }
                    }
                    if self.nodes[*b].needs_grad {
                        let bn = self.nodes[*b].data.len();
                        let slot = acc(&mut grads[*b], bn);
                        for (j, gv) in g.iter().enumerate() {
                            slot[j % bn] += *gv;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let bn = self.nodes[*b].data.len();
                    if self.nodes[*a].needs_grad {
                        let bdata = &self.nodes[*b].data;
                        let slot = acc(&mut grads[*a], self.nodes[*a].data.len());
                        for (j, gv) in g.iter().enumerate() {
                            slot[j] += *gv * bdata[j % bn];
                        }
                    }
                    if self.nodes[*b].needs_grad {
                        let adata = &self.nodes[*a].data;
                        let slot = acc(&mut grads[*b], bn);
                        for (j, gv) in g.iter().enumerate() {
                            slot[j % bn] += *gv * adata[j];
                        }
                    }
                }
                Op::Scale { a, c } => {
                    if self.nodes[*a].needs_grad {
                        let cv = R::from_f64(*c);
                        let slot = acc(&mut grads[*a], self.nodes[*a].data.len());
                        for (s, gv) in slot.iter_mut().zip(&g) {
                            *s += *gv * cv;
                        }
                    }
                }
                Op::Relu { a } => {
                    if self.nodes[*a].needs_grad {
                        let adata = &self.nodes[*a].data;
                        let slot = acc(&mut grads[*a], adata.len());
                        for (j, gv) in g.iter().enumerate() {
                            if adata[j] > R::zero() {
                                slot[j] += *gv;
                            }
                        }
                    }
                }
                Op::Gelu { a } => {
                    if self.nodes[*a].needs_grad {
                        let adata = &self.nodes[*a].data;
                        let slot = acc(&mut grads[*a], adata.len());
                        for (j, gv) in g.iter().enumerate() {
                            slot[j] += *gv * R::from_f64(gelu_grad(adata[j].as_f64()));
                        }
                    }
                }
                Op::Sigmoid { a } => {
                    if self.nodes[*a].needs_grad {
                        let out = &node.data;
                        let slot = acc(&mut grads[*a], out.len());
                        for (j, gv) in g.iter().enumerate() {
                            slot[j] += *gv * out[j] * (R::one() - out[j]);
                        }
                    }
                }
                Op::Softmax { a, axis } => {
                    if self.nodes[*a].needs_grad {
                        let out = &node.data;
                        let shape = &node.shape;
                        let axis_len = shape[*axis];
                        let outer: usize = shape[..*axis].iter().product();
                        let inner: usize = shape[*axis + 1..].iter().product();
                        let slot = acc(&mut grads[*a], out.len());
                        for o in 0..outer {
                            for i2 in 0..inner {
                                let idx = |t: usize| o * axis_len * inner + t * inner + i2;
                                let mut dot = R::zero();
                                for t in 0..axis_len {
                                    dot += g[idx(t)] * out[idx(t)];
                                }
                                for t in 0..axis_len {
                                    slot[idx(t)] += out[idx(t)] * (g[idx(t)] - dot);
                                }
                            }
                        }
                    }
                }
                Op::MaskedSoftmax { a } => {
                    // Masked outputs are exactly zero, so the plain softmax
                    // Jacobian-vector product already routes them no gradient.
                    if self.nodes[*a].needs_grad {
                        let out = &node.data;
                        let (rows, cols) = rows_cols(&node.shape);
                        let slot = acc(&mut grads[*a], out.len());
                        for r in 0..rows {
                            let mut dot = R::zero();
                            for c in 0..cols {
                                dot += g[r * cols + c] * out[r * cols + c];
                            }
                            for c in 0..cols {
                                slot[r * cols + c] +=
                                    out[r * cols + c] * (g[r * cols + c] - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let d = *node.shape.last().unwrap();
                    let xdata = &self.nodes[*x].data;
                    let gdata = &self.nodes[*gamma].data;
                    let rows = xdata.len() / d;
                    let mut dx = vec![0.0f64; xdata.len()];
                    let mut dgamma = vec![0.0f64; d];
                    let mut dbeta = vec![0.0f64; d];
                    for r in 0..rows {
                        let row: Vec<f64> =
                            xdata[r * d..(r + 1) * d].iter().map(|v| v.as_f64()).collect();
                        let grow: Vec<f64> =
                            g[r * d..(r + 1) * d].iter().map(|v| v.as_f64()).collect();
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                        let dxhat: Vec<f64> = (0..d)
                            .map(|j| grow[j] * gdata[j].as_f64())
                            .collect();
                        let dxhat_sum: f64 = dxhat.iter().sum();
                        let dxhat_xhat: f64 =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dgamma[j] += grow[j] * xhat[j];
                            dbeta[j] += grow[j];
                            dx[r * d + j] += inv_std / d as f64
                                * (d as f64 * dxhat[j] - dxhat_sum - xhat[j] * dxhat_xhat);
                        }
                    }
                    if self.nodes[*x].needs_grad {
                        let slot = acc(&mut grads[*x], xdata.len());
                        for (s, v) in slot.iter_mut().zip(&dx) {
                            *s += R::from_f64(*v);
                        }
                    }
                    if self.nodes[*gamma].needs_grad {
                        let slot = acc(&mut grads[*gamma], d);
                        for (s, v) in slot.iter_mut().zip(&dgamma) {
                            *s += R::from_f64(*v);
                        }
                    }
                    if self.nodes[*beta].needs_grad {
                        let slot = acc(&mut grads[*beta], d);
                        for (s, v) in slot.iter_mut().zip(&dbeta) {
                            *s += R::from_f64(*v);
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    ignore_id,
                } => {
                    if self.nodes[*logits].needs_grad {
                        let lshape = &self.nodes[*logits].shape;
                        let vocab = lshape[1];
                        let ldata = &self.nodes[*logits].data;
                        let count = targets
                            .iter()
                            .filter(|t| Some(**t) != *ignore_id)
                            .count();
                        if count > 0 {
                            let gscale = g[0].as_f64() / count as f64;
                            let slot = acc(&mut grads[*logits], ldata.len());
                            for (t, &tgt) in targets.iter().enumerate() {
                                if Some(tgt) == *ignore_id {
                                    continue;
                                }
                                let row = &ldata[t * vocab..(t + 1) * vocab];
                                let max = row
                                    .iter()
                                    .map(|v| v.as_f64())
                                    .fold(f64::NEG_INFINITY, f64::max);
                                let denom: f64 =
                                    row.iter().map(|v| (v.as_f64() - max).exp()).sum();
                                for c in 0..vocab {
                                    let p = (row[c].as_f64() - max).exp() / denom;
                                    let onehot = if c == tgt as usize { 1.0 } else { 0.0 };
                                    slot[t * vocab + c] +=
                                        R::from_f64(gscale * (p - onehot));
                                }
                            }
                        }
                    }
                }
                Op::Bce { pred, target } => {
                    if self.nodes[*pred].needs_grad {
                        let p_raw = self.nodes[*pred].data[0].as_f64();
                        // Flat gradient where the clamp binds.
                        let dv = if (1e-7..=1.0 - 1e-7).contains(&p_raw) {
                            let p = p_raw;
                            -(target / p) + (1.0 - target) / (1.0 - p)
                        } else {
                            0.0
                        };
                        let slot = acc(&mut grads[*pred], 1);
                        slot[0] += R::from_f64(g[0].as_f64() * dv);
                    }
                }
                Op::Embedding { table, ids } => {
                    if self.nodes[*table].needs_grad {
                        let d = node.shape[1];
                        let tlen = self.nodes[*table].data.len();
                        let slot = acc(&mut grads[*table], tlen);
                        for (r, &id) in ids.iter().enumerate() {
                            let dst = &mut slot[id as usize * d..(id as usize + 1) * d];
                            for (s, gv) in dst.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                                *s += *gv;
                            }
                        }
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut row_off = 0;
                    let d = node.shape[1];
                    for &p in parts.iter() {
                        let (r, _) = rows_cols(&self.nodes[p].shape);
                        if self.nodes[p].needs_grad {
                            let slot = acc(&mut grads[p], self.nodes[p].data.len());
                            for (s, gv) in slot
                                .iter_mut()
                                .zip(&g[row_off * d..(row_off + r) * d])
                            {
                                *s += *gv;
                            }
                        }
                        row_off += r;
                    }
                }
                Op::ConcatCols { parts } => {
                    let total_cols = node.shape[1];
                    let rows = node.shape[0];
                    let mut col_off = 0;
                    for &p in parts.iter() {
                        let (_, c) = rows_cols(&self.nodes[p].shape);
                        if self.nodes[p].needs_grad {
                            let slot = acc(&mut grads[p], self.nodes[p].data.len());
                            for r in 0..rows {
                                for j in 0..c {
                                    slot[r * c + j] += g[r * total_cols + col_off + j];
                                }
                            }
                        }
                        col_off += c;
                    }
                }
                Op::SliceRows { a, start } => {
                    if self.nodes[*a].needs_grad {
                        let cols = node.shape[1];
                        let slot = acc(&mut grads[*a], self.nodes[*a].data.len());
                        for (j, gv) in g.iter().enumerate() {
                            slot[start * cols + j] += *gv;
                        }
                    }
                }
                Op::SliceCols { a, start } => {
                    if self.nodes[*a].needs_grad {
                        let len = node.shape[1];
                        let (_, cols) = rows_cols(&self.nodes[*a].shape);
                        let rows = node.shape[0];
                        let slot = acc(&mut grads[*a], self.nodes[*a].data.len());
                        for r in 0..rows {
                            for j in 0..len {
                                slot[r * cols + start + j] += g[r * len + j];
                            }
                        }
                    }
                }
                Op::Reshape { a } => {
                    if self.nodes[*a].needs_grad {
                        let slot = acc(&mut grads[*a], self.nodes[*a].data.len());
                        for (s, gv) in slot.iter_mut().zip(&g) {
                            *s += *gv;
                        }
                    }
                }
                Op::SumAll { a } => {
                    if self.nodes[*a].needs_grad {
                        let slot = acc(&mut grads[*a], self.nodes[*a].data.len());
                        for s in slot.iter_mut() {
                            *s += g[0];
                        }
                    }
                }
                Op::MeanAll { a } => {
                    if self.nodes[*a].needs_grad {
                        let an = self.nodes[*a].data.len();
                        let gv = g[0] / R::from_f64(an as f64);
                        let slot = acc(&mut grads[*a], an);
                        for s in slot.iter_mut() {
                            *s += gv;
                        }
                    }
                }
            }
        }

        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), Some(gr)) = (node.param, grads[i].take()) {
                out.push((pid, gr));
            }
        }
        Ok(out)
    }

    /// Accumulates `d loss / d p` into every parameter's gradient slot.
    /// Every registered parameter ends up with a gradient; those the loss
    /// does not reach get exact zeros.
    pub fn backward(&self, loss: Var, params: &mut Params<R>) -> Result<()> {
        let grads = self.backward_collect(loss)?;
        params.ensure_grads();
        for (pid, g) in grads {
            params.get_mut(pid).tensor.accumulate_grad(&g);
        }
        Ok(())
    }
}
