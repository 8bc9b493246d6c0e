//! Direct optimization of compact keys and values against the dense
//! model's suffix predictions, with model weights frozen.

use std::ops::Range;

use serde::Serialize;

use crate::autodiff::{adamw_step, clip_global_norm, AdamState, AdamWConfig, Graph, Tensor};
use crate::error::{Error, Result};
use crate::eval::{eval_against, SuffixExample, SuffixMetrics};
use crate::model::{bind, compact_leaves, forward_graph, CompressedPrefixCache, Model};

pub const DEFAULT_RECORD_STEPS: [usize; 8] = [0, 1, 2, 5, 10, 20, 50, 100];

#[derive(Clone, Debug, PartialEq)]
pub struct CompactOptConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub record_steps: Vec<usize>,
    /// Also compute suffix metrics for every recorded cache.
    pub record_metrics: bool,
}

impl Default for CompactOptConfig {
    fn default() -> Self {
        CompactOptConfig {
            steps: 100,
            lr: 1e-2,
            weight_decay: 0.0,
            clip_norm: 1.0,
            record_steps: DEFAULT_RECORD_STEPS.to_vec(),
            record_metrics: false,
        }
    }
}

impl CompactOptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.clip_norm > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("compaction lr and clip norm must be positive, weight decay nonnegative".into()));
        }
        if self.record_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("record steps must be strictly increasing".into()));
        }
        if let Some(&s) = self.record_steps.iter().find(|&&s| s > self.steps) {
            return Err(Error::Config(format!("record step {s} beyond {} steps", self.steps)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompactionRecord {
    pub step: usize,
    pub l_kv: f64,
    pub metrics: Option<SuffixMetrics>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CompactionTrace {
    pub records: Vec<CompactionRecord>,
}

impl CompactionTrace {
    pub fn at(&self, step: usize) -> Option<f64> {
        self.records.iter().find(|r| r.step == step).map(|r| r.l_kv)
    }
}

/// Minimizes the mean KL from `teacher` (dense suffix logits, one row per
/// suffix token) to the logits under the compact cache, over keys and
/// values only. Any bias in `init` is kept fixed.
pub fn grad_compact_optimize(
    model: &Model,
    init: &CompressedPrefixCache,
    example: &SuffixExample,
    teacher: &Tensor,
    cfg: &CompactOptConfig,
) -> Result<(CompressedPrefixCache, CompactionTrace)> {
    grad_compact_optimize_rows(model, init, example, teacher, 0..example.suffix.len(), cfg)
}

/// As [`grad_compact_optimize`], with the loss restricted to suffix rows
/// `rows` (the reconstruction span, for instance).
pub fn grad_compact_optimize_rows(
    model: &Model,
    init: &CompressedPrefixCache,
    example: &SuffixExample,
    teacher: &Tensor,
    rows: Range<usize>,
    cfg: &CompactOptConfig,
) -> Result<(CompressedPrefixCache, CompactionTrace)> {
    cfg.validate()?;
    if rows.is_empty() || rows.end > example.suffix.len() {
        return Err(Error::Precondition(format!("loss rows {rows:?} outside a {}-token suffix", example.suffix.len())));
    }
    init.validate(&model.config)?;
    let n = example.prefix.len();
    if init.prefix_len != n || init.slots == 0 {
        return Err(Error::Precondition(format!(
            "compact cache with {} slots for a {}-token prefix cannot be optimized against a {n}-token prefix",
            init.slots, init.prefix_len
        )));
    }
    if teacher.rows() != example.suffix.len() {
        return Err(crate::error::shape_err!("{} teacher rows for {} suffix tokens", teacher.rows(), example.suffix.len()));
    }
    let v = teacher.cols();
    let target = Tensor::matrix(rows.len(), v, teacher.data()[rows.start * v..rows.end * v].to_vec())?;
    let mut cache = init.clone();
    let mut params: Vec<Tensor> = Vec::new();
    for h in cache.heads.iter().flatten() {
        params.push(Tensor::matrix(cache.slots, cache.d_head, h.keys.clone())?);
        params.push(Tensor::matrix(cache.slots, cache.d_head, h.values.clone())?);
    }
    let mut adam = AdamState::new(&params.iter().collect::<Vec<_>>());
    let opt = AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() };
    let mut trace = CompactionTrace::default();
    for step in 0..=cfg.steps {
        write_back(&mut cache, &params);
        let mut g = Graph::new();
        let bw = bind(&mut g, &model.weights, false);
        let layers = compact_leaves(&mut g, &cache, true);
        let fw = forward_graph(&mut g, &bw, &model.config, &example.suffix, n, |_, l, _| Ok(layers[l].to_attention()))?;
        let scored = g.slice_rows(fw.logits, rows.start, rows.len())?;
        let loss = g.kl_divergence_logits_rows(&target, scored)?;
        let l_kv = g.value(loss).item();
        if !l_kv.is_finite() {
            return Err(Error::Numerical(format!("compaction loss is not finite at step {step}")));
        }
        if cfg.record_steps.contains(&step) {
            let metrics = if cfg.record_metrics { Some(eval_against(model, example, teacher, &cache)?) } else { None };
            trace.records.push(CompactionRecord { step, l_kv, metrics });
        }
        if step == cfg.steps {
            break;
        }
        let grads = g.backward(loss)?;
        let mut gs: Vec<Tensor> =
            layers.iter().flat_map(|l| l.keys.iter().zip(&l.values)).flat_map(|(&k, &v)| [grads.wrt(k), grads.wrt(v)]).collect();
        clip_global_norm(&mut gs, cfg.clip_norm);
        let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
        adamw_step(&mut refs, &gs, &mut adam, &opt, None)?;
    }
    Ok((cache, trace))
}

fn write_back(cache: &mut CompressedPrefixCache, params: &[Tensor]) {
    for (h, kv) in cache.heads.iter_mut().flatten().zip(params.chunks(2)) {
        h.keys.copy_from_slice(kv[0].data());
        h.values.copy_from_slice(kv[1].data());
    }
}
