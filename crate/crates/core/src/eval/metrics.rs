//! Suffix metrics of a compressed prefix against the dense reference.

use serde::Serialize;

use super::data::SuffixExample;
use crate::autodiff::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::model::{CompressedPrefixCache, Model};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SuffixMetrics {
    pub dppl: f64,
    pub kl: f64,
    pub top1: f64,
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Compares suffix logits row by row. `targets[i]` is the token that row
/// `i` predicts; rows past the end of `targets` count only toward KL and
/// top-1.
pub fn compare_logits(dense: &Tensor, compressed: &Tensor, targets: &[usize]) -> Result<SuffixMetrics> {
    if dense.shape() != compressed.shape() || dense.shape().len() != 2 {
        return Err(shape_err!("logits {:?} vs {:?}", dense.shape(), compressed.shape()));
    }
    let rows = dense.rows();
    if rows == 0 || targets.len() > rows {
        return Err(shape_err!("{} targets for {rows} rows", targets.len()));
    }
    let (mut kl, mut agree, mut nll_d, mut nll_c) = (0.0, 0usize, 0.0, 0.0);
    for i in 0..rows {
        let (lp, lq) = (log_softmax(dense.row(i)), log_softmax(compressed.row(i)));
        kl += lp.iter().zip(&lq).map(|(a, b)| if *a == f64::NEG_INFINITY { 0.0 } else { a.exp() * (a - b) }).sum::<f64>();
        agree += usize::from(argmax(dense.row(i)) == argmax(compressed.row(i)));
        if let Some(&t) = targets.get(i) {
            nll_d -= lp[t];
            nll_c -= lq[t];
        }
    }
    let dppl = if targets.is_empty() {
        0.0
    } else {
        let k = targets.len() as f64;
        (nll_c / k).exp() - (nll_d / k).exp()
    };
    let metrics = SuffixMetrics { dppl, kl: (kl / rows as f64).max(0.0), top1: agree as f64 / rows as f64 };
    if !(metrics.dppl.is_finite() && metrics.kl.is_finite()) {
        return Err(Error::Numerical("suffix metrics are not finite".into()));
    }
    Ok(metrics)
}

/// Dense suffix logits of `example`: rows `n..n+k` of a pass over the full window.
pub fn dense_suffix_logits(model: &Model, example: &SuffixExample) -> Result<Tensor> {
    let full = model.forward_dense(&example.full(), None)?.logits;
    let (n, v) = (example.prefix.len(), full.cols());
    Tensor::matrix(example.suffix.len(), v, full.data()[n * v..].to_vec())
}

pub fn eval_suffix_metrics(model: &Model, example: &SuffixExample, cache: &CompressedPrefixCache) -> Result<SuffixMetrics> {
    let dense = dense_suffix_logits(model, example)?;
    eval_against(model, example, &dense, cache)
}

/// As [`eval_suffix_metrics`] with the dense suffix logits precomputed.
pub fn eval_against(model: &Model, example: &SuffixExample, dense: &Tensor, cache: &CompressedPrefixCache) -> Result<SuffixMetrics> {
    if cache.prefix_len != example.prefix.len() {
        return Err(shape_err!("cache built for a {}-token prefix, example has {}", cache.prefix_len, example.prefix.len()));
    }
    let compressed = model.forward_with_compressed_prefix(cache, &example.suffix, example.prefix.len())?;
    compare_logits(dense, &compressed, &example.suffix[1..])
}
