//! Batch evaluation over examples and keep ratios, written as CSV.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use super::metrics::{dense_suffix_logits, eval_against};
use super::niah::{eval_niah, niah_cache, NiahExample};
use super::SuffixExample;
use crate::compress::{attention_matching_compress, budget, grad_compact_optimize, keep_first_m, AmConfig, CompactOptConfig};
use crate::error::{Error, Result};
use crate::model::{CompressedPrefixCache, Model};
use crate::seed::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// Attention matching.
    Am,
    /// Gradient-based compaction from the first `m` slots.
    Grad,
    /// The first `m` slots, unchanged.
    First,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "am" => Ok(Method::Am),
            "grad" => Ok(Method::Grad),
            "first" => Ok(Method::First),
            _ => Err(Error::Config(format!("unknown method `{s}` (expected am, grad or first)"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Am => "am",
            Method::Grad => "grad",
            Method::First => "first",
        })
    }
}

/// Builds the compact cache of `ex.prefix` with `method`.
pub fn compress_example(
    model: &Model,
    ex: &SuffixExample,
    method: Method,
    keep_ratio: f64,
    am: &AmConfig,
    opt: &CompactOptConfig,
) -> Result<CompressedPrefixCache> {
    match method {
        Method::Am => {
            let cfg = AmConfig { keep_ratio, ..am.clone() };
            Ok(attention_matching_compress(model, &ex.prefix, &ex.suffix, &cfg)?.0)
        }
        Method::First | Method::Grad => {
            let dense = model.forward_dense(&ex.prefix, None)?.cache;
            let init = keep_first_m(&dense, budget(keep_ratio, ex.prefix.len())?)?;
            if method == Method::First {
                return Ok(init);
            }
            let teacher = dense_suffix_logits(model, ex)?;
            Ok(grad_compact_optimize(model, &init, ex, &teacher, opt)?.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuffixRow {
    pub model_tag: String,
    pub method: String,
    pub keep_ratio: f64,
    pub example_id: usize,
    pub dppl: f64,
    pub kl: f64,
    pub top1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    pub model_tag: String,
    pub method: Method,
    pub keep_ratios: Vec<f64>,
    pub am: AmConfig,
    pub opt: CompactOptConfig,
}

/// Rows in `(keep_ratio, example)` order. A failed example yields a row of
/// NaNs and an entry in `failures`.
#[derive(Clone, Debug, Default)]
pub struct SuiteOutcome {
    pub rows: Vec<SuffixRow>,
    pub failures: Vec<String>,
}

impl SuiteOutcome {
    /// Per keep ratio: mean ΔPPL, KL and top-1 over rows without failures.
    pub fn means(&self) -> Vec<(f64, f64, f64, f64)> {
        let mut out: Vec<(f64, f64, f64, f64)> = Vec::new();
        let mut keeps: Vec<f64> = self.rows.iter().map(|r| r.keep_ratio).collect();
        keeps.dedup();
        for k in keeps {
            let rows: Vec<&SuffixRow> = self.rows.iter().filter(|r| r.keep_ratio == k && r.kl.is_finite()).collect();
            let n = rows.len() as f64;
            let mean = |f: fn(&SuffixRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
            out.push((k, mean(|r| r.dppl), mean(|r| r.kl), mean(|r| r.top1)));
        }
        out
    }
}

pub fn run_suite(model: &Model, cfg: &SuiteConfig, examples: &[SuffixExample], out: Option<&Path>) -> Result<SuiteOutcome> {
    for &k in &cfg.keep_ratios {
        budget(k, 1)?;
    }
    let dense: Vec<Result<crate::autodiff::Tensor>> = examples.par_iter().map(|ex| dense_suffix_logits(model, ex)).collect();
    let mut outcome = SuiteOutcome::default();
    for &keep in &cfg.keep_ratios {
        let results: Vec<Result<_>> = examples
            .par_iter()
            .zip(&dense)
            .map(|(ex, teacher)| {
                let teacher = teacher.as_ref().map_err(|e| Error::Precondition(e.to_string()))?;
                let cache = compress_example(model, ex, cfg.method, keep, &cfg.am, &cfg.opt)?;
                eval_against(model, ex, teacher, &cache)
            })
            .collect();
        for (id, r) in results.into_iter().enumerate() {
            let (dppl, kl, top1) = match r {
                Ok(m) => (m.dppl, m.kl, m.top1),
                Err(e) => {
                    outcome.failures.push(format!("keep {keep}, example {id}: {e}"));
                    (f64::NAN, f64::NAN, f64::NAN)
                }
            };
            outcome.rows.push(SuffixRow {
                model_tag: cfg.model_tag.clone(),
                method: cfg.method.to_string(),
                keep_ratio: keep,
                example_id: id,
                dppl,
                kl,
                top1,
            });
        }
    }
    if let Some(path) = out {
        write_csv(path, &outcome.rows)?;
    }
    Ok(outcome)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NiahRow {
    pub model_tag: String,
    pub keep_ratio: f64,
    pub depth: f64,
    pub example_id: usize,
    pub exact_match: bool,
}

#[derive(Clone, Debug, Default)]
pub struct NiahOutcome {
    pub rows: Vec<NiahRow>,
    /// Uncompressed success per example.
    pub native: Vec<bool>,
    pub failures: Vec<String>,
}

impl NiahOutcome {
    /// Exact-match rate at `keep`, over every example or only over the
    /// natively solved ones.
    pub fn accuracy(&self, keep: f64, conditioned: bool) -> f64 {
        let rows: Vec<&NiahRow> =
            self.rows.iter().filter(|r| r.keep_ratio == keep && (!conditioned || self.native[r.example_id])).collect();
        if rows.is_empty() {
            return f64::NAN;
        }
        rows.iter().filter(|r| r.exact_match).count() as f64 / rows.len() as f64
    }

    pub fn native_rate(&self) -> f64 {
        self.native.iter().filter(|&&b| b).count() as f64 / self.native.len().max(1) as f64
    }
}

pub fn run_niah_suite(
    model: &Model,
    model_tag: &str,
    keep_ratios: &[f64],
    examples: &[(f64, NiahExample)],
    opt: &CompactOptConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<NiahOutcome> {
    let native: Vec<Result<bool>> = examples
        .par_iter()
        .map(|(_, ex)| eval_niah(model, &CompressedPrefixCache::from_dense(&model.forward_dense(&ex.prompt, None)?.cache), ex))
        .collect();
    let mut outcome = NiahOutcome::default();
    for (id, n) in native.into_iter().enumerate() {
        outcome.native.push(n.unwrap_or_else(|e| {
            outcome.failures.push(format!("native, example {id}: {e}"));
            false
        }));
    }
    for &keep in keep_ratios {
        let results: Vec<Result<bool>> = examples
            .par_iter()
            .enumerate()
            .map(|(id, (_, ex))| {
                let cache = niah_cache(model, ex, keep, opt, derive_seed(seed, &format!("niah/{keep}/{id}")))?;
                eval_niah(model, &cache, ex)
            })
            .collect();
        for (id, r) in results.into_iter().enumerate() {
            let exact_match = r.unwrap_or_else(|e| {
                outcome.failures.push(format!("keep {keep}, example {id}: {e}"));
                false
            });
            outcome.rows.push(NiahRow {
                model_tag: model_tag.into(),
                keep_ratio: keep,
                depth: examples[id].0,
                example_id: id,
                exact_match,
            });
        }
    }
    if let Some(path) = out {
        write_csv(path, &outcome.rows)?;
    }
    Ok(outcome)
}
