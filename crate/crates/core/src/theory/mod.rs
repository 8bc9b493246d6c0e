//! Exact-arithmetic simplified transformer and the two histogram
//! constructions: one whose prefix cannot be compressed without a constant
//! error, and one that compresses any prefix to a single KV pair.
//!
//! Conventions: row vectors, unscaled softmax attention over all positions
//! (no causal mask, no normalization), block output `FFN(X + heads · W_O)`,
//! positions numbered from 1.

mod hist;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{shape_err, Error, Result};

pub use hist::{
    build_hist_compressible, build_hist_simple, hist, prop1_bound, verify_prop1, verify_prop2, HistCompressionPolicy, Prop1Policy,
};

/// Row-wise feed-forward map, realized as an exact evaluator.
#[derive(Clone)]
pub struct Evaluator {
    pub name: &'static str,
    f: Arc<dyn Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync>,
}

impl Evaluator {
    pub fn new(name: &'static str, f: impl Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync + 'static) -> Self {
        Evaluator { name, f: Arc::new(f) }
    }

    pub fn identity() -> Self {
        Evaluator::new("identity", |x| Ok(x.to_vec()))
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        (self.f)(x)
    }
}

impl fmt::Debug for Evaluator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Evaluator({})", self.name)
    }
}

#[derive(Clone, Debug)]
pub struct TheoryHead {
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct TheoryBlock {
    pub heads: Vec<TheoryHead>,
    /// `[heads · d_v x d_in]`.
    pub wo: DMatrix<f64>,
    pub ffn: Evaluator,
}

#[derive(Clone, Debug)]
pub struct TheoryTransformer {
    pub m_alb: usize,
    pub n_max: usize,
    /// `te[a][i - 1]` for symbol `a` at position `i`.
    pub te: Vec<Vec<DVector<f64>>>,
    pub blocks: Vec<TheoryBlock>,
}

/// Per-layer, per-head cache of one prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct TheoryCache {
    /// `[layer][head]` as `(K, V)`.
    pub layers: Vec<Vec<(DMatrix<f64>, DMatrix<f64>)>>,
}

pub trait CompressionPolicy {
    /// Compact `(K, V)` for one layer and head of an `n`-row prefix cache.
    fn compress(&self, layer: usize, head: usize, k: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)>;
}

/// Keeps every pair.
pub struct IdentityPolicy;

impl CompressionPolicy for IdentityPolicy {
    fn compress(&self, _: usize, _: usize, k: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Ok((k.clone(), v.clone()))
    }
}

fn softmax_rows(s: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = s.clone();
    for mut row in out.row_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

fn apply_rows(ffn: &Evaluator, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = x.row_iter().map(|r| ffn.apply(&r.iter().copied().collect::<Vec<_>>())).collect::<Result<_>>()?;
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(shape_err!("evaluator `{}` returned rows of differing width", ffn.name));
    }
    Ok(DMatrix::from_row_iterator(rows.len(), cols, rows.into_iter().flatten()))
}

impl TheoryTransformer {
    fn embed(&self, tokens: &[usize], first_pos: usize) -> Result<DMatrix<f64>> {
        if tokens.is_empty() {
            return Err(Error::Precondition("theory transformer needs at least one token".into()));
        }
        if first_pos + tokens.len() - 1 > self.n_max {
            return Err(Error::Precondition(format!(
                "positions up to {} exceed the maximum length {}",
                first_pos + tokens.len() - 1,
                self.n_max
            )));
        }
        if let Some(&a) = tokens.iter().find(|&&a| a >= self.m_alb) {
            return Err(Error::Precondition(format!("symbol {a} outside an alphabet of {}", self.m_alb)));
        }
        let d = self.te[0][0].len();
        Ok(DMatrix::from_fn(tokens.len(), d, |r, c| self.te[tokens[r]][first_pos + r - 1][c]))
    }

    /// One block over queries `x`, with `extra` pairs (per head) placed
    /// before the keys and values of `x` itself.
    fn block(
        &self,
        b: &TheoryBlock,
        x: &DMatrix<f64>,
        extra: Option<&[(DMatrix<f64>, DMatrix<f64>)]>,
    ) -> Result<(DMatrix<f64>, Vec<(DMatrix<f64>, DMatrix<f64>)>)> {
        let mut outs = Vec::new();
        let mut kv = Vec::new();
        for (h, head) in b.heads.iter().enumerate() {
            let q = x * &head.wq;
            let k = x * &head.wk;
            let v = x * &head.wv;
            let (keys, values) = match extra {
                Some(e) => {
                    let (ek, ev) = &e[h];
                    if ek.nrows() != ev.nrows() || (ek.nrows() > 0 && (ek.ncols() != k.ncols() || ev.ncols() != v.ncols())) {
                        return Err(shape_err!("compact pairs do not fit head {h}"));
                    }
                    (stack(ek, &k), stack(ev, &v))
                }
                None => (k.clone(), v.clone()),
            };
            let a = softmax_rows(&(&q * keys.transpose()));
            outs.push(a * values);
            kv.push((k, v));
        }
        let cat = DMatrix::from_fn(x.nrows(), outs.iter().map(|o| o.ncols()).sum(), |r, c| {
            let mut c = c;
            for o in &outs {
                if c < o.ncols() {
                    return o[(r, c)];
                }
                c -= o.ncols();
            }
            unreachable!()
        });
        let mixed = x + cat * &b.wo;
        Ok((apply_rows(&b.ffn, &mixed)?, kv))
    }

    fn run(&self, tokens: &[usize]) -> Result<(DMatrix<f64>, TheoryCache)> {
        let mut x = self.embed(tokens, 1)?;
        let mut cache = TheoryCache { layers: vec![] };
        for b in &self.blocks {
            let (y, kv) = self.block(b, &x, None)?;
            cache.layers.push(kv);
            x = y;
        }
        Ok((x, cache))
    }

    pub fn prefix_cache(&self, prefix: &[usize]) -> Result<TheoryCache> {
        Ok(self.run(prefix)?.1)
    }
}

fn stack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    if a.nrows() == 0 {
        return b.clone();
    }
    DMatrix::from_fn(a.nrows() + b.nrows(), b.ncols(), |r, c| if r < a.nrows() { a[(r, c)] } else { b[(r - a.nrows(), c)] })
}

/// Final-token representation.
pub fn theory_forward(tt: &TheoryTransformer, tokens: &[usize]) -> Result<DVector<f64>> {
    let (x, _) = tt.run(tokens)?;
    Ok(x.row(x.nrows() - 1).transpose())
}

/// Final-token representation of `suffix` when every layer's prefix cache
/// is replaced by `policy`'s compact pairs.
pub fn theory_forward_compressed(
    tt: &TheoryTransformer,
    policy: &dyn CompressionPolicy,
    prefix: &[usize],
    suffix: &[usize],
) -> Result<DVector<f64>> {
    if suffix.is_empty() {
        return Err(Error::Precondition("the output is the last suffix token, so the suffix must be non-empty".into()));
    }
    if prefix.is_empty() {
        return theory_forward(tt, suffix);
    }
    let cache = tt.prefix_cache(prefix)?;
    let mut x = tt.embed(suffix, prefix.len() + 1)?;
    for (l, b) in tt.blocks.iter().enumerate() {
        let compact: Vec<_> = cache.layers[l].iter().enumerate().map(|(h, (k, v))| policy.compress(l, h, k, v)).collect::<Result<_>>()?;
        x = tt.block(b, &x, Some(&compact))?.0;
    }
    Ok(x.row(x.nrows() - 1).transpose())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoryCheckResult {
    pub name: String,
    /// Lower bound the error must reach (non-compressibility checks).
    pub bound: Option<f64>,
    /// Worst error found: the min over candidates of the max over
    /// adversarial suffixes, or the max over tested pairs.
    pub achieved: f64,
    /// Error target for compressibility checks.
    pub epsilon: Option<f64>,
    pub cases: usize,
    pub pass: bool,
}
