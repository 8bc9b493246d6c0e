//! Attention matching: keep the keys with the most attention mass, refit a
//! per-slot log-bias so the softmax normalizers match, then refit values by
//! ridge regression onto the dense prefix-attention outputs.

use nalgebra::DMatrix;

use super::budget;
use crate::autodiff::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::model::{CompactHead, CompressedPrefixCache, Model};

/// Weights below this are floored before taking the log.
pub const W_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct AmConfig {
    pub keep_ratio: f64,
    pub max_queries: usize,
    pub nnls_iters: usize,
    pub ridge: f64,
    /// Upper box bound on normalizer weights; `None` uses the prefix length.
    pub w_max: Option<f64>,
}

impl Default for AmConfig {
    fn default() -> Self {
        AmConfig { keep_ratio: 0.25, max_queries: 256, nnls_iters: 8, ridge: 1e-4, w_max: None }
    }
}

impl AmConfig {
    pub fn validate(&self) -> Result<()> {
        budget(self.keep_ratio, 1)?;
        if self.max_queries == 0 || self.nnls_iters == 0 {
            return Err(Error::Config("max_queries and nnls_iters must be positive".into()));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::Config(format!("ridge coefficient {} must be a nonnegative number", self.ridge)));
        }
        if self.w_max.is_some_and(|w| !(w > 0.0)) {
            return Err(Error::Config("w_max must be positive".into()));
        }
        Ok(())
    }
}

/// Per-head diagnostics, indexed `[layer][head]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AmReport {
    pub selected: Vec<Vec<Vec<usize>>>,
    /// `‖P C2 − O‖ / ‖O‖` over the sampled queries.
    pub residuals: Vec<Vec<f64>>,
    /// NNLS objective before the first and after the last sweep.
    pub nnls_objective: Vec<Vec<(f64, f64)>>,
}

/// RMS attention score per key; the top `m`, earliest first on ties,
/// returned in ascending order.
pub fn am_select_keys(a: &Tensor, m: usize) -> Result<Vec<usize>> {
    if a.shape().len() != 2 || a.rows() == 0 {
        return Err(shape_err!("attention rows must be a non-empty matrix, got {:?}", a.shape()));
    }
    let l = a.cols();
    if m > l {
        return Err(Error::Budget { requested: m, available: l });
    }
    let scores = rms_scores(a);
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut keep = order[..m].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

pub(crate) fn rms_scores(a: &Tensor) -> Vec<f64> {
    let rows = a.rows() as f64;
    (0..a.cols()).map(|j| ((0..a.rows()).map(|i| a.at(i, j).powi(2)).sum::<f64>() / rows).sqrt()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct NnlsFit {
    pub w: Vec<f64>,
    /// `‖E w − Z‖²` at the start and after every sweep.
    pub objective: Vec<f64>,
}

/// Box-constrained least squares `min ‖E w − z‖²`, `0 ≤ w ≤ w_max`, by
/// projected gradient sweeps starting from `w = 1`.
///
/// Each sweep takes the better of the projected exact-line-search step and
/// the exact step truncated at the first bound, so the objective never rises.
pub fn nnls_box(e: &Tensor, z: &[f64], w_max: f64, iters: usize) -> Result<NnlsFit> {
    let (rows, m) = (e.rows(), e.cols());
    if z.len() != rows {
        return Err(shape_err!("{} targets for {rows} rows", z.len()));
    }
    let objective =
        |w: &[f64]| -> f64 { (0..rows).map(|i| (e.row(i).iter().zip(w).map(|(a, b)| a * b).sum::<f64>() - z[i]).powi(2)).sum() };
    let mut w = vec![1.0f64.min(w_max); m];
    let mut trace = vec![objective(&w)];
    for _ in 0..iters {
        let r: Vec<f64> = (0..rows).map(|i| e.row(i).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() - z[i]).collect();
        let g: Vec<f64> = (0..m).map(|j| (0..rows).map(|i| e.at(i, j) * r[i]).sum()).collect();
        let d: Vec<f64> = (0..m).map(|j| if (w[j] <= 0.0 && g[j] > 0.0) || (w[j] >= w_max && g[j] < 0.0) { 0.0 } else { -g[j] }).collect();
        let ed: Vec<f64> = (0..rows).map(|i| e.row(i).iter().zip(&d).map(|(a, b)| a * b).sum()).collect();
        let denom: f64 = ed.iter().map(|v| v * v).sum();
        let dd: f64 = d.iter().map(|v| v * v).sum();
        if denom == 0.0 || dd == 0.0 {
            trace.push(*trace.last().expect("non-empty"));
            continue;
        }
        let alpha = dd / denom;
        let projected: Vec<f64> = w.iter().zip(&d).map(|(wj, dj)| (wj + alpha * dj).clamp(0.0, w_max)).collect();
        let mut cap = alpha;
        for (wj, dj) in w.iter().zip(&d) {
            if *dj < 0.0 {
                cap = cap.min(-wj / dj);
            } else if *dj > 0.0 {
                cap = cap.min((w_max - wj) / dj);
            }
        }
        let truncated: Vec<f64> = w.iter().zip(&d).map(|(wj, dj)| (wj + cap * dj).clamp(0.0, w_max)).collect();
        let (fp, ft) = (objective(&projected), objective(&truncated));
        let prev = *trace.last().expect("non-empty");
        let (next, f) = if fp <= ft { (projected, fp) } else { (truncated, ft) };
        if f <= prev {
            w = next;
            trace.push(f);
        } else {
            trace.push(prev);
        }
    }
    Ok(NnlsFit { w, objective: trace })
}

/// Log-bias for compact keys `c1` so that `Σ_j exp(q_i·c_j/√d + β_j)`
/// matches the dense normalizers `z` in least squares.
pub fn am_fit_bias(q: &Tensor, c1: &Tensor, z: &[f64], w_max: f64, iters: usize) -> Result<(Vec<f64>, NnlsFit)> {
    if z.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Precondition("normalizers must be positive and finite".into()));
    }
    let log_z: Vec<f64> = z.iter().map(|v| v.ln()).collect();
    fit_bias_logits(&scaled_logits(q, c1)?, &log_z, w_max, iters)
}

/// Same fit from compact logits and log-normalizers; both are shifted by a
/// common constant first, which leaves the least-squares solution unchanged.
fn fit_bias_logits(lc: &Tensor, log_z: &[f64], w_max: f64, iters: usize) -> Result<(Vec<f64>, NnlsFit)> {
    let shift = lc.data().iter().chain(log_z).copied().fold(f64::NEG_INFINITY, f64::max);
    let e = Tensor::new(lc.shape().to_vec(), lc.data().iter().map(|v| (v - shift).exp()).collect())?;
    let z: Vec<f64> = log_z.iter().map(|v| (v - shift).exp()).collect();
    let fit = nnls_box(&e, &z, w_max, iters)?;
    let beta = fit.w.iter().map(|w| w.max(W_FLOOR).ln()).collect();
    Ok((beta, fit))
}

fn scaled_logits(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    if q.cols() != k.cols() {
        return Err(shape_err!("queries of width {} vs keys of width {}", q.cols(), k.cols()));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut l = q.matmul(&k.transpose())?;
    l.data_mut().iter_mut().for_each(|v| *v *= scale);
    Ok(l)
}

fn to_na(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn from_na(m: &DMatrix<f64>) -> Tensor {
    let data = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect();
    Tensor::matrix(m.nrows(), m.ncols(), data).expect("consistent dims")
}

/// Largest singular value of `p` by 20 power iterations on `PᵀP`.
pub(crate) fn spectral_norm(p: &DMatrix<f64>) -> f64 {
    let gram = p.transpose() * p;
    let n = gram.ncols();
    let mut v = nalgebra::DVector::from_element(n, 1.0 / (n as f64).sqrt());
    for _ in 0..20 {
        let w = &gram * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
    }
    v.dot(&(&gram * &v)).max(0.0).sqrt()
}

/// Ridge fit `C2 = (PᵀP + λ_eff I)⁻¹ PᵀO` with `λ_eff = ridge · σ_max(P)²`.
/// With `λ_eff = 0`, the least-squares solution of minimum norm; P must
/// have full rank.
pub fn am_fit_values(p: &Tensor, o: &Tensor, ridge: f64) -> Result<Tensor> {
    if p.rows() != o.rows() {
        return Err(shape_err!("P has {} rows, O has {}", p.rows(), o.rows()));
    }
    let (pn, on) = (to_na(p), to_na(o));
    let sigma = spectral_norm(&pn);
    let lambda = ridge * sigma * sigma;
    let c2 = if lambda > 0.0 {
        let mut a = pn.transpose() * &pn;
        for i in 0..a.ncols() {
            a[(i, i)] += lambda;
        }
        let rhs = pn.transpose() * &on;
        a.cholesky().ok_or_else(|| Error::Numerical("ridge system is not positive definite".into()))?.solve(&rhs)
    } else {
        let (rows, m) = (pn.nrows(), pn.ncols());
        let svd = pn.svd(true, true);
        let tol = svd.singular_values.max() * rows.max(m) as f64 * f64::EPSILON;
        // Fewer queries than slots is fine at full row rank: the minimum-norm
        // solution fits exactly.
        if svd.singular_values.iter().any(|&s| s <= tol) {
            return Err(Error::Numerical("value fit is singular without ridge".into()));
        }
        svd.solve(&on, tol).map_err(|e| Error::Numerical(e.to_string()))?
    };
    let out = from_na(&c2);
    if !out.is_finite() {
        return Err(Error::Numerical("value fit produced non-finite entries".into()));
    }
    Ok(out)
}

fn softmax_rows_biased(l: &Tensor, beta: &[f64]) -> Tensor {
    let mut out = l.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        row.iter_mut().zip(beta).for_each(|(v, b)| *v += b);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        row.iter_mut().for_each(|v| {
            *v = (*v - max).exp();
            s += *v;
        });
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let data = idx.iter().flat_map(|&i| t.row(i).to_vec()).collect();
    Tensor::matrix(idx.len(), t.cols(), data).expect("consistent dims")
}

/// Up to `max` row indices out of `k`, evenly strided.
pub(crate) fn query_rows(k: usize, max: usize) -> Vec<usize> {
    if k <= max {
        (0..k).collect()
    } else {
        (0..max).map(|i| i * k / max).collect()
    }
}

struct HeadFit {
    head: CompactHead,
    selected: Vec<usize>,
    residual: f64,
    nnls: (f64, f64),
}

fn compress_head(q: &Tensor, k: &Tensor, v: &Tensor, m: usize, cfg: &AmConfig) -> Result<HeadFit> {
    let n = k.rows();
    let l = scaled_logits(q, k)?;
    let a = softmax_rows_biased(&l, &vec![0.0; n]);
    let log_z: Vec<f64> = (0..l.rows())
        .map(|i| {
            let row = l.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
        })
        .collect();
    let o = a.matmul(v)?;
    let selected = am_select_keys(&a, m)?;
    let c1 = gather_rows(k, &selected);
    let lc = scaled_logits(q, &c1)?;
    let (beta, fit) = fit_bias_logits(&lc, &log_z, cfg.w_max.unwrap_or(n as f64), cfg.nnls_iters)?;
    let p = softmax_rows_biased(&lc, &beta);
    let c2 = am_fit_values(&p, &o, cfg.ridge)?;
    let recon = p.matmul(&c2)?;
    let err: f64 = recon.data().iter().zip(o.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm = o.sq_norm().sqrt();
    let residual = if norm > 0.0 { err / norm } else { err };
    let nnls = (fit.objective[0], *fit.objective.last().expect("non-empty"));
    Ok(HeadFit { head: CompactHead { keys: c1.into_data(), values: c2.into_data(), bias: Some(beta) }, selected, residual, nnls })
}

/// Builds a compact cache for `prefix`, using the suffix's dense query
/// states as the sampled queries for every layer and head.
pub fn attention_matching_compress(
    model: &Model,
    prefix: &[usize],
    suffix: &[usize],
    cfg: &AmConfig,
) -> Result<(CompressedPrefixCache, AmReport)> {
    cfg.validate()?;
    let n = prefix.len();
    if n == 0 {
        return Err(Error::Precondition("attention matching needs a non-empty prefix".into()));
    }
    if suffix.is_empty() {
        return Err(Error::Precondition("attention matching needs suffix queries".into()));
    }
    let m = budget(cfg.keep_ratio, n)?;
    let mut full = prefix.to_vec();
    full.extend_from_slice(suffix);
    let dense = model.forward_dense(&full, Some(n))?;
    let trace = dense.trace.expect("trace requested");
    let cache = dense.cache.prefix(n)?;
    let rows = query_rows(suffix.len(), cfg.max_queries);
    let mut out = CompressedPrefixCache { prefix_len: n, slots: m, d_head: model.config.d_head(), heads: vec![] };
    let mut report = AmReport { selected: vec![], residuals: vec![], nnls_objective: vec![] };
    for l in 0..cache.n_layers() {
        let (mut heads, mut sel, mut res, mut obj) = (vec![], vec![], vec![], vec![]);
        for h in 0..cache.n_heads() {
            let q = gather_rows(&trace.queries[l][h], &rows);
            let fit = compress_head(&q, &cache.keys[l][h], &cache.values[l][h], m, cfg)?;
            heads.push(fit.head);
            sel.push(fit.selected);
            res.push(fit.residual);
            obj.push(fit.nnls);
        }
        out.heads.push(heads);
        report.selected.push(sel);
        report.residuals.push(res);
        report.nnls_objective.push(obj);
    }
    Ok((out, report))
}
