//! Reverse-mode differentiation over a fixed vocabulary of dense operations.
//!
//! A [`Graph`] is an append-only list of nodes in topological order. Values
//! are computed eagerly when a node is pushed; [`Graph::backward`] walks the
//! list in reverse and accumulates adjoints for every node that depends on a
//! trainable leaf.

use std::rc::Rc;

use super::tensor::{gemm, MatView, Tensor};
use crate::error::{precondition, shape_err, Error, Result};

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Visibility, bias and gating options for a row-wise softmax.
///
/// Row `i` attends to column `j` iff `mask[i][j]`. The optional column bias is
/// added after scaling; the optional gate multiplies the unnormalized weights
/// before renormalization, except at column `self_slot_offset + i` where the
/// gate is pinned to 1.
#[derive(Clone, Debug)]
pub struct SoftmaxSpec {
    pub scale: f64,
    pub mask: Option<Rc<Vec<bool>>>,
    pub col_bias: Option<Rc<Vec<f64>>>,
    pub self_slot_offset: Option<usize>,
}

impl SoftmaxSpec {
    pub fn new(scale: f64) -> Self {
        SoftmaxSpec { scale, mask: None, col_bias: None, self_slot_offset: None }
    }

    pub fn with_mask(mut self, mask: Rc<Vec<bool>>) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn with_col_bias(mut self, bias: Rc<Vec<f64>>) -> Self {
        self.col_bias = Some(bias);
        self
    }

    pub fn with_self_slot(mut self, offset: usize) -> Self {
        self.self_slot_offset = Some(offset);
        self
    }

    fn visible(&self, i: usize, j: usize, cols: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[i * cols + j])
    }
}

/// Lower-triangular (causal) visibility pattern for a `rows x cols` score
/// matrix whose query `i` sits at key column `offset + i`.
pub fn causal_mask(rows: usize, cols: usize, offset: usize) -> Rc<Vec<bool>> {
    let mut m = vec![false; rows * cols];
    for i in 0..rows {
        for j in 0..cols.min(offset + i + 1) {
            m[i * cols + j] = true;
        }
    }
    Rc::new(m)
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine { x: usize, mul: f64 },
    AddRow { x: usize, bias: usize },
    MulScalar { x: usize, s: usize },
    Softmax { logits: usize, gate: Option<usize>, spec: SoftmaxSpec },
    RmsNorm { x: usize, gain: Option<usize>, inv_rms: Vec<f64> },
    Gelu(usize),
    EluPlusOne(usize),
    Gather { table: usize, ids: Vec<usize> },
    SliceCols { x: usize, start: usize },
    SliceRows { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    RowSum(usize),
    DivRows { x: usize, d: usize },
    RowDot(usize, usize),
    RowNormalize { x: usize, norms: Vec<f64> },
    Sum(usize),
    Mean(usize),
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Tensor },
    KlDiv { logits: usize, row_mass: Vec<f64>, p: Rc<Tensor>, q: Tensor },
    SteGate(usize),
    ClampPass(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to every trainable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`; zeros when `v` did not influence the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn matrix_dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op, parents: &[usize]) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    // ── Linear algebra ────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes a 2-D operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = matrix_dims(self.val(a));
        let (br, bc) = matrix_dims(self.val(b));
        let av = MatView::new(self.val(a).data(), ar, ac).maybe_t(ta);
        let bv = MatView::new(self.val(b).data(), br, bc).maybe_t(tb);
        if av.cols != bv.rows {
            return Err(shape_err!("matmul inner dimensions differ: [{}x{}] x [{}x{}]", av.rows, av.cols, bv.rows, bv.cols));
        }
        let (m, n) = (av.rows, bv.cols);
        let mut out = vec![0.0; m * n];
        gemm(av, bv, &mut out, 1.0);
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0, ta, tb }, &[a.0, b.0]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(shape_err!("{what}: shapes {:?} and {:?} differ", self.val(a).shape(), self.val(b).shape()));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self.val(a).data().iter().zip(self.val(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.val(a).shape().to_vec(), data).expect("same shape");
        self.push(value, op, &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_map(a, b, Op::Add(a.0, b.0), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_map(a, b, Op::Sub(a.0, b.0), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_map(a, b, Op::Mul(a.0, b.0), |x, y| x * y))
    }

    /// `mul * x + add`, elementwise with constant coefficients.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let t = self.val(x);
        let data = t.data().iter().map(|&v| mul * v + add).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Affine { x: x.0, mul }, &[x.0])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    /// Adds a row vector (`bias.numel() == x.cols()`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = matrix_dims(self.val(x));
        if self.val(bias).numel() != c {
            return Err(shape_err!("add_row: bias has {} entries, rows have {c}", self.val(bias).numel()));
        }
        let b = self.val(bias).data();
        let mut data = self.val(x).data().to_vec();
        for i in 0..r {
            for (v, &bj) in data[i * c..(i + 1) * c].iter_mut().zip(b) {
                *v += bj;
            }
        }
        let value = Tensor::new(self.val(x).shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow { x: x.0, bias: bias.0 }, &[x.0, bias.0]))
    }

    /// Multiplies every entry of `x` by the single-element node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.val(s).numel() != 1 {
            return Err(shape_err!("mul_scalar: expected a single-element factor"));
        }
        let c = self.val(s).item();
        let t = self.val(x);
        let data = t.data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::MulScalar { x: x.0, s: s.0 }, &[x.0, s.0]))
    }

    // ── Softmax family ────────────────────────────────────────────────

    /// Row-wise softmax of `scale · logits` restricted to `mask = 1` entries.
    /// Masked entries are exactly zero. Fails on a row with no active entry.
    pub fn masked_row_softmax(&mut self, logits: Var, mask: &Tensor, scale: f64) -> Result<Var> {
        if mask.shape() != self.val(logits).shape() {
            return Err(shape_err!("mask shape {:?} vs logits {:?}", mask.shape(), self.val(logits).shape()));
        }
        let bits = mask.data().iter().map(|&v| v != 0.0).collect();
        self.softmax(logits, None, SoftmaxSpec::new(scale).with_mask(Rc::new(bits)))
    }

    /// General row softmax; see [`SoftmaxSpec`].
    pub fn softmax(&mut self, logits: Var, gate: Option<Var>, spec: SoftmaxSpec) -> Result<Var> {
        let (r, c) = matrix_dims(self.val(logits));
        if let Some(m) = &spec.mask {
            if m.len() != r * c {
                return Err(shape_err!("softmax mask has {} entries for [{r}x{c}]", m.len()));
            }
        }
        if let Some(b) = &spec.col_bias {
            if b.len() != c {
                return Err(shape_err!("softmax column bias has {} entries for {c} columns", b.len()));
            }
        }
        if let Some(g) = gate {
            if self.val(g).numel() != c {
                return Err(shape_err!("softmax gate has {} entries for {c} columns", self.val(g).numel()));
            }
        }
        let x = self.val(logits).data();
        let gate_vals = gate.map(|g| self.val(g).data());
        let mut out = vec![0.0; r * c];
        let mut e = vec![0.0; c];
        for i in 0..r {
            let s = softmax_row(&spec, x, gate_vals, i, c, &mut e)?;
            for j in 0..c {
                out[i * c + j] = e[j] * gate_at(&spec, gate_vals, i, j) / s;
            }
        }
        let value = Tensor::matrix(r, c, out)?;
        let mut parents = vec![logits.0];
        parents.extend(gate.map(|g| g.0));
        Ok(self.push(value, Op::Softmax { logits: logits.0, gate: gate.map(|g| g.0), spec }, &parents))
    }

    // ── Normalization and pointwise nonlinearities ────────────────────

    /// `gain ⊙ x / sqrt(mean(x²) + eps)` over the last dimension.
    pub fn rms_norm(&mut self, x: Var, gain: Option<Var>, eps: f64) -> Result<Var> {
        let (r, c) = matrix_dims(self.val(x));
        if let Some(g) = gain {
            if self.val(g).numel() != c {
                return Err(shape_err!("rms_norm gain has {} entries for width {c}", self.val(g).numel()));
            }
        }
        let xs = self.val(x).data();
        let gs = gain.map(|g| self.val(g).data());
        let mut out = vec![0.0; r * c];
        let mut inv_rms = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let denom = (ms + eps).sqrt();
            if denom == 0.0 {
                return Err(Error::Precondition("rms_norm of an all-zero row with eps = 0".into()));
            }
            let inv = 1.0 / denom;
            inv_rms.push(inv);
            for j in 0..c {
                let g = gs.map_or(1.0, |g| g[j]);
                out[i * c + j] = g * row[j] * inv;
            }
        }
        let value = Tensor::new(self.val(x).shape().to_vec(), out)?;
        let mut parents = vec![x.0];
        parents.extend(gain.map(|g| g.0));
        Ok(self.push(value, Op::RmsNorm { x: x.0, gain: gain.map(|g| g.0), inv_rms }, &parents))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let data = t.data().iter().map(|&v| gelu(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Gelu(x.0), &[x.0])
    }

    /// `z + 1` for `z >= 0`, `exp(z)` otherwise.
    pub fn elu_plus_one(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let data = t.data().iter().map(|&v| elu_plus_one(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::EluPlusOne(x.0), &[x.0])
    }

    // ── Indexing and layout ───────────────────────────────────────────

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = matrix_dims(self.val(table));
        precondition!(!ids.is_empty(), "gather_rows needs at least one id");
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Index(format!("row id {bad} not below table size {v}")));
        }
        let src = self.val(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let value = Tensor::matrix(ids.len(), d, out)?;
        Ok(self.push(value, Op::Gather { table: table.0, ids: ids.to_vec() }, &[table.0]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = matrix_dims(self.val(x));
        if len == 0 || start + len > c {
            return Err(shape_err!("slice_cols {start}..{} out of {c}", start + len));
        }
        let src = self.val(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let value = Tensor::matrix(r, len, out)?;
        Ok(self.push(value, Op::SliceCols { x: x.0, start }, &[x.0]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = matrix_dims(self.val(x));
        if len == 0 || start + len > r {
            return Err(shape_err!("slice_rows {start}..{} out of {r}", start + len));
        }
        let out = self.val(x).data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::matrix(len, c, out)?;
        Ok(self.push(value, Op::SliceRows { x: x.0, start }, &[x.0]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        precondition!(!parts.is_empty(), "concat_cols of nothing");
        let r = self.val(parts[0]).rows();
        if parts.iter().any(|&p| self.val(p).rows() != r) {
            return Err(shape_err!("concat_cols: row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.val(p).cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.val(p).row(i));
            }
        }
        let value = Tensor::matrix(r, total, out)?;
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(value, Op::ConcatCols(idx.clone()), &idx))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        precondition!(!parts.is_empty(), "concat_rows of nothing");
        let c = self.val(parts[0]).cols();
        if parts.iter().any(|&p| self.val(p).cols() != c) {
            return Err(shape_err!("concat_rows: column counts differ"));
        }
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            out.extend_from_slice(self.val(p).data());
            rows += self.val(p).rows();
        }
        let value = Tensor::matrix(rows, c, out)?;
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(value, Op::ConcatRows(idx.clone()), &idx))
    }

    // ── Row reductions ────────────────────────────────────────────────

    /// `[M x N] -> [M x 1]` row sums.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let (r, _) = matrix_dims(self.val(x));
        let out = (0..r).map(|i| self.val(x).row(i).iter().sum()).collect();
        let value = Tensor::matrix(r, 1, out).expect("rows > 0");
        self.push(value, Op::RowSum(x.0), &[x.0])
    }

    /// Divides row `i` of `x` by `d[i]` (`d` is `[M x 1]`).
    pub fn div_rows(&mut self, x: Var, d: Var) -> Result<Var> {
        let (r, c) = matrix_dims(self.val(x));
        if self.val(d).numel() != r {
            return Err(shape_err!("div_rows: {} divisors for {r} rows", self.val(d).numel()));
        }
        let dv = self.val(d).data();
        let xs = self.val(x).data();
        let out = (0..r * c).map(|k| xs[k] / dv[k / c]).collect();
        let value = Tensor::matrix(r, c, out)?;
        Ok(self.push(value, Op::DivRows { x: x.0, d: d.0 }, &[x.0, d.0]))
    }

    /// Row-wise inner products, `[M x 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "row_dot")?;
        let (r, _) = matrix_dims(self.val(a));
        let out = (0..r).map(|i| self.val(a).row(i).iter().zip(self.val(b).row(i)).map(|(x, y)| x * y).sum()).collect();
        let value = Tensor::matrix(r, 1, out)?;
        Ok(self.push(value, Op::RowDot(a.0, b.0), &[a.0, b.0]))
    }

    /// Scales each row to unit Euclidean norm. Fails on a zero row.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let (r, c) = matrix_dims(self.val(x));
        let xs = self.val(x).data();
        let mut norms = Vec::with_capacity(r);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Precondition(format!("row {i} has norm {n}; cannot normalize")));
            }
            norms.push(n);
            for j in 0..c {
                out[i * c + j] = row[j] / n;
            }
        }
        let value = Tensor::new(self.val(x).shape().to_vec(), out)?;
        Ok(self.push(value, Op::RowNormalize { x: x.0, norms }, &[x.0]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0), &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x.0), &[x.0])
    }

    // ── Losses ────────────────────────────────────────────────────────

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        precondition!(!targets.is_empty(), "cross_entropy_rows needs at least one row");
        let (r, v) = matrix_dims(self.val(logits));
        if targets.len() != r {
            return Err(shape_err!("{} targets for {r} logit rows", targets.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index(format!("target {bad} not below vocabulary {v}")));
        }
        let x = self.val(logits);
        let mut probs = vec![0.0; r * v];
        let mut loss = 0.0;
        for i in 0..r {
            let lse = log_softmax_into(x.row(i), &mut probs[i * v..(i + 1) * v]);
            loss += lse - x.row(i)[targets[i]];
        }
        let probs = Tensor::matrix(r, v, probs)?;
        let value = Tensor::scalar(loss / r as f64);
        Ok(self.push(value, Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), probs }, &[logits.0]))
    }

    /// Mean over rows of `Σ p (log p − log softmax(q_logits))`, with `0 log 0 = 0`.
    /// `p` is a constant: no gradient flows into it.
    pub fn kl_divergence_rows(&mut self, p: Rc<Tensor>, q_logits: Var) -> Result<Var> {
        let (r, v) = matrix_dims(self.val(q_logits));
        if p.rows() != r || p.cols() != v {
            return Err(shape_err!("KL target [{}x{}] vs logits [{r}x{v}]", p.rows(), p.cols()));
        }
        if p.data().iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(Error::Precondition("KL target has a negative or non-finite entry".into()));
        }
        let x = self.val(q_logits);
        let mut q = vec![0.0; r * v];
        let mut row_mass = Vec::with_capacity(r);
        let mut total = 0.0;
        for i in 0..r {
            let lse = log_softmax_into(x.row(i), &mut q[i * v..(i + 1) * v]);
            let mut kl = 0.0;
            for (j, &pj) in p.row(i).iter().enumerate() {
                if pj > 0.0 {
                    kl += pj * (pj.ln() - (x.row(i)[j] - lse));
                }
            }
            row_mass.push(p.row(i).iter().sum());
            total += kl;
        }
        let q = Tensor::matrix(r, v, q)?;
        let value = Tensor::scalar(total / r as f64);
        Ok(self.push(value, Op::KlDiv { logits: q_logits.0, row_mass, p, q }, &[q_logits.0]))
    }

    /// KL against the softmax of constant teacher logits. Both log-probabilities
    /// use the same arithmetic, so equal logits give exactly zero.
    pub fn kl_divergence_logits_rows(&mut self, teacher_logits: &Tensor, q_logits: Var) -> Result<Var> {
        let (r, v) = matrix_dims(self.val(q_logits));
        if teacher_logits.rows() != r || teacher_logits.cols() != v {
            return Err(shape_err!("KL teacher [{}x{}] vs logits [{r}x{v}]", teacher_logits.rows(), teacher_logits.cols()));
        }
        let x = self.val(q_logits);
        let mut p = vec![0.0; r * v];
        let mut q = vec![0.0; r * v];
        let mut total = 0.0;
        for i in 0..r {
            let t = teacher_logits.row(i);
            let lse_p = log_softmax_into(t, &mut p[i * v..(i + 1) * v]);
            let lse_q = log_softmax_into(x.row(i), &mut q[i * v..(i + 1) * v]);
            if !lse_p.is_finite() {
                return Err(Error::Numerical("teacher logits are not finite".into()));
            }
            let mut kl = 0.0;
            for j in 0..v {
                let pj = p[i * v + j];
                if pj > 0.0 {
                    kl += pj * ((t[j] - lse_p) - (x.row(i)[j] - lse_q));
                }
            }
            total += kl;
        }
        let row_mass = (0..r).map(|i| p[i * v..(i + 1) * v].iter().sum()).collect();
        let p = Rc::new(Tensor::matrix(r, v, p)?);
        let q = Tensor::matrix(r, v, q)?;
        let value = Tensor::scalar(total / r as f64);
        Ok(self.push(value, Op::KlDiv { logits: q_logits.0, row_mass, p, q }, &[q_logits.0]))
    }

    /// Straight-through threshold: forward `1{p > tau}`, backward identity.
    pub fn ste_gate(&mut self, p: Var, tau: f64) -> Var {
        let t = self.val(p);
        let data = t.data().iter().map(|&v| if v > tau { 1.0 } else { 0.0 }).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::SteGate(p.0), &[p.0])
    }

    /// Clamp into `[lo, hi]` with an identity backward. Meant for absorbing
    /// rounding at the edge of an already-bounded quantity.
    pub fn clamp_pass(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let t = self.val(x);
        let data = t.data().iter().map(|&v| v.clamp(lo, hi)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::ClampPass(x.0), &[x.0])
    }

    // ── Backward ──────────────────────────────────────────────────────

    /// Reverse-mode accumulation from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.val(root).numel() != 1 {
            return Err(Error::Contract(format!("backward root must be scalar, got shape {:?}", self.val(root).shape())));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::scalar(1.0));
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads, shapes })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], idx: usize) -> Option<&'g mut [f64]> {
        if !self.nodes[idx].requires_grad {
            return None;
        }
        let shape = self.nodes[idx].value.shape();
        Some(grads[idx].get_or_insert_with(|| Tensor::zeros(shape)).data_mut())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let at = &self.nodes[*a].value;
                let bt = &self.nodes[*b].value;
                let av = MatView::new(at.data(), at.rows(), at.cols()).maybe_t(*ta);
                let bv = MatView::new(bt.data(), bt.rows(), bt.cols()).maybe_t(*tb);
                let gv = MatView::new(gd, av.rows, bv.cols);
                if let Some(da) = self.slot(grads, *a) {
                    if *ta {
                        gemm(bv, gv.t(), da, 1.0);
                    } else {
                        gemm(gv, bv.t(), da, 1.0);
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    if *tb {
                        gemm(gv.t(), av, db, 1.0);
                    } else {
                        gemm(av.t(), gv, db, 1.0);
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(da) = self.slot(grads, *a) {
                    axpy(da, gd, 1.0);
                }
                if let Some(db) = self.slot(grads, *b) {
                    axpy(db, gd, sign);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                if let Some(da) = self.slot(grads, *a) {
                    for k in 0..gd.len() {
                        da[k] += gd[k] * bv[k];
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for k in 0..gd.len() {
                        db[k] += gd[k] * av[k];
                    }
                }
            }
            Op::Affine { x, mul } => {
                if let Some(dx) = self.slot(grads, *x) {
                    axpy(dx, gd, *mul);
                }
            }
            Op::AddRow { x, bias } => {
                let c = node.value.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    axpy(dx, gd, 1.0);
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for row in gd.chunks(c) {
                        axpy(db, row, 1.0);
                    }
                }
            }
            Op::MulScalar { x, s } => {
                let xv = self.nodes[*x].value.data();
                let sv = self.nodes[*s].value.item();
                if let Some(dx) = self.slot(grads, *x) {
                    axpy(dx, gd, sv);
                }
                if let Some(ds) = self.slot(grads, *s) {
                    ds[0] += gd.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Op::Softmax { logits, gate, spec } => {
                self.softmax_backward(node, *logits, *gate, spec, gd, grads);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.nodes[*x].value.data();
                let c = node.value.cols();
                let gains = gain.map(|g| self.nodes[g].value.data().to_vec());
                if let Some(dx) = self.slot(grads, *x) {
                    for (i, &inv) in inv_rms.iter().enumerate() {
                        let row = &xv[i * c..(i + 1) * c];
                        let gr = &gd[i * c..(i + 1) * c];
                        let gg = |j: usize| gains.as_ref().map_or(1.0, |g| g[j]) * gr[j];
                        let dot: f64 = (0..c).map(|j| gg(j) * row[j]).sum();
                        let coef = inv * inv * inv * dot / c as f64;
                        for j in 0..c {
                            dx[i * c + j] += inv * gg(j) - row[j] * coef;
                        }
                    }
                }
                if let Some(gain) = gain {
                    if let Some(dg) = self.slot(grads, *gain) {
                        for (i, &inv) in inv_rms.iter().enumerate() {
                            for j in 0..c {
                                dg[j] += gd[i * c + j] * xv[i * c + j] * inv;
                            }
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.nodes[*x].value.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for k in 0..gd.len() {
                        dx[k] += gd[k] * gelu_grad(xv[k]);
                    }
                }
            }
            Op::EluPlusOne(x) => {
                let xv = self.nodes[*x].value.data();
                let yv = node.value.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for k in 0..gd.len() {
                        dx[k] += gd[k] * if xv[k] >= 0.0 { 1.0 } else { yv[k] };
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = node.value.cols();
                if let Some(dt) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut dt[id * d..(id + 1) * d], &gd[r * d..(r + 1) * d], 1.0);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let c_in = self.nodes[*x].value.cols();
                let len = node.value.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for (i, row) in gd.chunks(len).enumerate() {
                        axpy(&mut dx[i * c_in + start..i * c_in + start + len], row, 1.0);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    axpy(&mut dx[start * c..start * c + gd.len()], gd, 1.0);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p].value.cols();
                    if let Some(dp) = self.slot(grads, p) {
                        for (i, row) in dp.chunks_mut(w).enumerate() {
                            axpy(row, &gd[i * total + off..i * total + off + w], 1.0);
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p].value.numel();
                    if let Some(dp) = self.slot(grads, p) {
                        axpy(dp, &gd[off..off + len], 1.0);
                    }
                    off += len;
                }
            }
            Op::RowSum(x) => {
                let c = self.nodes[*x].value.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for (k, v) in dx.iter_mut().enumerate() {
                        *v += gd[k / c];
                    }
                }
            }
            Op::DivRows { x, d } => {
                let c = node.value.cols();
                let xv = self.nodes[*x].value.data();
                let dv = self.nodes[*d].value.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for k in 0..dx.len() {
                        dx[k] += gd[k] / dv[k / c];
                    }
                }
                if let Some(dd) = self.slot(grads, *d) {
                    for (i, ddi) in dd.iter_mut().enumerate() {
                        let s: f64 = (0..c).map(|j| gd[i * c + j] * xv[i * c + j]).sum();
                        *ddi -= s / (dv[i] * dv[i]);
                    }
                }
            }
            Op::RowDot(a, b) => {
                let c = self.nodes[*a].value.cols();
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                if let Some(da) = self.slot(grads, *a) {
                    for k in 0..da.len() {
                        da[k] += gd[k / c] * bv[k];
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for k in 0..db.len() {
                        db[k] += gd[k / c] * av[k];
                    }
                }
            }
            Op::RowNormalize { x, norms } => {
                let c = node.value.cols();
                let yv = node.value.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for (i, &n) in norms.iter().enumerate() {
                        let y = &yv[i * c..(i + 1) * c];
                        let gr = &gd[i * c..(i + 1) * c];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[i * c + j] += (gr[j] - y[j] * dot) / n;
                        }
                    }
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                let numel = self.nodes[*x].value.numel();
                let scale = if matches!(node.op, Op::Mean(_)) { 1.0 / numel as f64 } else { 1.0 };
                if let Some(dx) = self.slot(grads, *x) {
                    let v = gd[0] * scale;
                    dx.iter_mut().for_each(|d| *d += v);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let r = targets.len();
                let v = probs.cols();
                if let Some(dl) = self.slot(grads, *logits) {
                    let s = gd[0] / r as f64;
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dl[i * v + j] += s * (probs.data()[i * v + j] - onehot);
                        }
                    }
                }
            }
            Op::KlDiv { logits, row_mass, p, q } => {
                let r = row_mass.len();
                let v = q.cols();
                if let Some(dl) = self.slot(grads, *logits) {
                    let s = gd[0] / r as f64;
                    for (i, &mass) in row_mass.iter().enumerate() {
                        for j in 0..v {
                            let k = i * v + j;
                            dl[k] += s * (mass * q.data()[k] - p.data()[k]);
                        }
                    }
                }
            }
            Op::SteGate(p) | Op::ClampPass(p) => {
                if let Some(dp) = self.slot(grads, *p) {
                    axpy(dp, gd, 1.0);
                }
            }
        }
    }

    fn softmax_backward(
        &self,
        node: &Node,
        logits: usize,
        gate: Option<usize>,
        spec: &SoftmaxSpec,
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (r, c) = (node.value.rows(), node.value.cols());
        let y = node.value.data();
        // dz_ij = y_ij (G_ij - <y_i, G_i>)
        let centered: Vec<f64> = (0..r)
            .flat_map(|i| {
                let yr = &y[i * c..(i + 1) * c];
                let gr = &gd[i * c..(i + 1) * c];
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                gr.iter().map(move |g| g - dot)
            })
            .collect();
        if let Some(dl) = self.slot(grads, logits) {
            for k in 0..r * c {
                dl[k] += spec.scale * y[k] * centered[k];
            }
        }
        let Some(gate) = gate else { return };
        let xs = self.nodes[logits].value.data();
        let gate_vals = Some(self.nodes[gate].value.data());
        let Some(dg) = self.slot(grads, gate) else { return };
        let mut e = vec![0.0; c];
        for i in 0..r {
            let s = softmax_row(spec, xs, gate_vals, i, c, &mut e).expect("validated in forward");
            for j in 0..c {
                let pinned = spec.self_slot_offset.is_some_and(|o| o + i == j);
                if pinned || e[j] == 0.0 {
                    continue;
                }
                dg[j] += e[j] / s * centered[i * c + j];
            }
        }
    }
}

fn gate_at(spec: &SoftmaxSpec, gate: Option<&[f64]>, i: usize, j: usize) -> f64 {
    match gate {
        Some(g) if spec.self_slot_offset.is_none_or(|o| o + i != j) => g[j],
        _ => 1.0,
    }
}

/// Fills `e` with masked `exp(z - max)` for row `i` and returns the gated
/// normalizer `Σ e_j g_j`.
fn softmax_row(spec: &SoftmaxSpec, x: &[f64], gate: Option<&[f64]>, i: usize, c: usize, e: &mut [f64]) -> Result<f64> {
    let row = &x[i * c..(i + 1) * c];
    let z = |j: usize| spec.scale * row[j] + spec.col_bias.as_ref().map_or(0.0, |b| b[j]);
    let mut max = f64::NEG_INFINITY;
    for j in 0..c {
        if spec.visible(i, j, c) {
            max = max.max(z(j));
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::Precondition(format!("softmax row {i} has no active entry")));
    }
    let mut s = 0.0;
    for j in 0..c {
        e[j] = if spec.visible(i, j, c) { (z(j) - max).exp() } else { 0.0 };
        s += e[j] * gate_at(spec, gate, i, j);
    }
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::Precondition(format!("softmax row {i} has total mass {s}")));
    }
    Ok(s)
}

/// Writes `softmax(x)` into `out` and returns `logsumexp(x)`.
pub(crate) fn log_softmax_into(x: &[f64], out: &mut [f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
    max + s.ln()
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn elu_plus_one(x: f64) -> f64 {
    if x >= 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}
