//! Continued pretraining with a dense pass and a sparsified pass over the
//! same weights, combined into distillation, anchor and budget terms.

mod state;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adamw_step, clip_global_norm, global_norm, AdamWConfig, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{bind, forward_graph, masked_visibility, LayerAttention, Model};
use crate::router::{
    attn_policy, bind_router, rand_policy, router_scores_graph, BoundRouter, PolicyKind, RouterTrace, SparsificationPolicy,
};
use crate::seed::derive_seed;

pub use state::TrainState;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_mask: f64,
    pub lambda_anchor: f64,
    pub lambda_budget: f64,
    pub policy: SparsificationPolicy,
    pub d_r: usize,
    pub tau: f64,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub seq_len: usize,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub log_interval: usize,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_interval: usize,
    pub val_sequences: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_mask: 1.0,
            lambda_anchor: 1.0,
            lambda_budget: 0.1,
            policy: SparsificationPolicy { kind: PolicyKind::Router, rho: 0.5, seed: 0 },
            d_r: crate::router::DEFAULT_D_R,
            tau: crate::router::DEFAULT_TAU,
            peak_lr: 1e-4,
            min_lr: 5e-6,
            warmup_steps: 600,
            total_steps: 2000,
            seq_len: 256,
            batch_size: 2,
            weight_decay: 0.01,
            clip_norm: 1.0,
            seed: 0,
            log_interval: 100,
            checkpoint_interval: 500,
            val_sequences: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in [("lambda_mask", self.lambda_mask), ("lambda_anchor", self.lambda_anchor), ("lambda_budget", self.lambda_budget)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a nonnegative number"));
            }
        }
        self.policy.validate()?;
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau {} outside (0, 1)", self.tau));
        }
        if !(self.peak_lr >= 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.peak_lr) {
            return bad("learning rates must satisfy 0 <= min_lr <= peak_lr".into());
        }
        if self.seq_len < 2 || self.batch_size == 0 || self.total_steps == 0 || self.log_interval == 0 || self.d_r == 0 {
            return bad("seq_len >= 2 and positive batch_size, total_steps, log_interval, d_r are required".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive".into());
        }
        Ok(())
    }

    /// The budget weight actually applied: fixed-count policies ignore it.
    pub fn effective_lambda_budget(&self) -> f64 {
        match self.policy.kind {
            PolicyKind::Router => self.lambda_budget,
            PolicyKind::Rand | PolicyKind::Attn => 0.0,
        }
    }

    /// Whether the sparsified pass contributes to the objective at all.
    pub fn uses_masked_pass(&self) -> bool {
        self.lambda_mask > 0.0 || self.effective_lambda_budget() > 0.0
    }

    pub fn tokens_per_step(&self) -> usize {
        self.seq_len * self.batch_size
    }
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to `min_lr` at
/// `total_steps`, constant afterwards.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    if step >= cfg.total_steps || cfg.total_steps <= cfg.warmup_steps {
        return cfg.min_lr;
    }
    let frac = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    cfg.min_lr + (cfg.peak_lr - cfg.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_mask: f64,
    pub l_anchor: f64,
    pub l_budget: f64,
    pub total: f64,
    /// Per router site `(F, G)`, averaged over the batch.
    pub sites: Vec<(f64, f64)>,
    pub grad_norm: f64,
}

impl LossBreakdown {
    pub fn mean_f(&self) -> f64 {
        mean(self.sites.iter().map(|s| s.0)).unwrap_or(1.0)
    }

    pub fn mean_g(&self) -> f64 {
        mean(self.sites.iter().map(|s| s.1)).unwrap_or(1.0)
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

// ── Loss terms ──────────────────────────────────────────────────────────

fn scored_rows(g: &Graph, logits: Var) -> Result<usize> {
    let t = g.value(logits).rows();
    if t < 2 {
        return Err(Error::Precondition("next-token losses need at least two positions".into()));
    }
    Ok(t - 1)
}

/// KL from the detached dense distribution to the masked one over the
/// positions that predict tokens 2..T.
pub(crate) fn loss_mask_graph(g: &mut Graph, dense: Var, masked: Var) -> Result<Var> {
    let n = scored_rows(g, dense)?;
    let d = g.value(dense);
    let teacher = Tensor::matrix(n, d.cols(), d.data()[..n * d.cols()].to_vec())?;
    let q = g.slice_rows(masked, 0, n)?;
    g.kl_divergence_logits_rows(&teacher, q)
}

pub(crate) fn loss_anchor_graph(g: &mut Graph, dense: Var, tokens: &[usize]) -> Result<Var> {
    let n = scored_rows(g, dense)?;
    if tokens.len() != n + 1 {
        return Err(crate::error::shape_err!("{} tokens for {} logit rows", tokens.len(), n + 1));
    }
    let rows = g.slice_rows(dense, 0, n)?;
    g.cross_entropy_rows(rows, &tokens[1..])
}

/// Mean over sites of `F G / rho + (1 - F)(1 - G) / (1 - rho)` with each
/// `F` held constant.
pub(crate) fn loss_budget_graph(g: &mut Graph, sites: &[(f64, Var)], rho: f64) -> Result<Var> {
    check_rho(rho)?;
    if sites.is_empty() {
        return Err(Error::Precondition("budget loss needs at least one router site".into()));
    }
    let mut acc: Option<Var> = None;
    for &(f, gv) in sites {
        let b = g.affine(gv, f / rho - (1.0 - f) / (1.0 - rho), (1.0 - f) / (1.0 - rho));
        acc = Some(match acc {
            Some(a) => g.add(a, b)?,
            None => b,
        });
    }
    Ok(g.scale(acc.expect("non-empty"), 1.0 / sites.len() as f64))
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Config(format!("target keep rate {rho} outside (0, 1)")));
    }
    Ok(())
}

pub fn loss_mask(dense_logits: &Tensor, masked_logits: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let d = g.constant(dense_logits.clone());
    let m = g.constant(masked_logits.clone());
    let l = loss_mask_graph(&mut g, d, m)?;
    Ok(g.value(l).item())
}

pub fn loss_anchor(dense_logits: &Tensor, tokens: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let d = g.constant(dense_logits.clone());
    let l = loss_anchor_graph(&mut g, d, tokens)?;
    Ok(g.value(l).item())
}

pub fn loss_budget(traces: &[RouterTrace], rho: f64) -> Result<f64> {
    let mut g = Graph::new();
    let sites: Vec<(f64, Var)> = traces.iter().map(|t| (t.f, g.constant(Tensor::scalar(t.g)))).collect();
    let l = loss_budget_graph(&mut g, &sites, rho)?;
    Ok(g.value(l).item())
}

// ── Masked pass ─────────────────────────────────────────────────────────

/// Attention setup for one sequence's sparsified pass. Router masks are
/// produced inside the pass from the hidden state entering each site.
pub(crate) struct MaskedPass<'a> {
    pub kind: PolicyKind,
    pub tau: f64,
    pub routers: &'a [BoundRouter],
    /// Masks decided before the pass (rand / attn policies).
    pub fixed: Vec<Vec<bool>>,
}

pub(crate) struct MaskedOutput {
    pub logits: Var,
    /// Per site: `p` as a `[T x 1]` node (router) and the hard mask.
    pub sites: Vec<(Option<Var>, Vec<bool>)>,
}

pub(crate) fn masked_pass(
    g: &mut Graph,
    model: &Model,
    bw: &crate::model::BoundWeights,
    tokens: &[usize],
    setup: &MaskedPass<'_>,
) -> Result<MaskedOutput> {
    let cfg = &model.config;
    let n_sites = cfg.router_layers.len();
    let mut sites: Vec<(Option<Var>, Vec<bool>)> = Vec::with_capacity(n_sites);
    let mut gates: Vec<(Var, Rc<Vec<bool>>)> = Vec::with_capacity(n_sites);
    let fw = forward_graph(g, bw, cfg, tokens, 0, |g, layer, x| {
        let Some(site) = cfg.router_site_for(layer) else {
            return Ok(LayerAttention::Causal);
        };
        if site == gates.len() {
            let (p, gate, mask) = match setup.kind {
                PolicyKind::Router => {
                    let p = router_scores_graph(g, &setup.routers[site], x)?;
                    let gate = g.ste_gate(p, setup.tau);
                    let mask = g.value(gate).data().iter().map(|&v| v == 1.0).collect();
                    (Some(p), gate, mask)
                }
                PolicyKind::Rand | PolicyKind::Attn => {
                    let mask: Vec<bool> = setup.fixed[site].clone();
                    let vals = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                    (None, g.constant(Tensor::new(vec![mask.len()], vals)?), mask)
                }
            };
            gates.push((gate, masked_visibility(&mask)));
            sites.push((p, mask));
        }
        let (gate, visible) = &gates[site];
        Ok(LayerAttention::Gated { gate: *gate, visible: visible.clone() })
    })?;
    Ok(MaskedOutput { logits: fw.logits, sites })
}

fn fixed_masks(cfg: &TrainConfig, model: &Model, dense_probs: &[Vec<Var>], g: &Graph, t: usize, seed: u64) -> Result<Vec<Vec<bool>>> {
    let rho = cfg.policy.rho;
    model
        .config
        .router_layers
        .iter()
        .enumerate()
        .map(|(site, &layer)| match cfg.policy.kind {
            PolicyKind::Router => Ok(Vec::new()),
            PolicyKind::Rand => Ok(rand_policy(t, rho, derive_seed(seed, &format!("rand/{site}")))),
            PolicyKind::Attn => {
                let probs: Vec<&Tensor> = dense_probs[layer].iter().map(|&v| g.value(v)).collect();
                attn_policy(&probs, rho)
            }
        })
        .collect()
}

// ── Training step ───────────────────────────────────────────────────────

/// One optimizer step over `batch`: dense pass, sparsified pass, combined
/// objective, a single backward, global clipping and a joint AdamW update.
pub fn train_step(state: &mut TrainState, batch: &[Vec<usize>], cfg: &TrainConfig) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let step = state.step;
    let mut g = Graph::new();
    let bw = bind(&mut g, &state.model.weights, true);
    let routers: Vec<BoundRouter> = state.routers.iter().map(|r| bind_router(&mut g, r, true)).collect();
    let use_masked = cfg.uses_masked_pass();
    let lambda_budget = cfg.effective_lambda_budget();
    let n_sites = state.model.config.router_layers.len();
    if use_masked && cfg.policy.kind == PolicyKind::Router && routers.len() != n_sites {
        return Err(Error::Contract(format!("{} routers for {n_sites} sites", routers.len())));
    }

    let mut totals: Vec<Var> = Vec::with_capacity(batch.len());
    let mut out = LossBreakdown { sites: vec![(0.0, 0.0); if use_masked { n_sites } else { 0 }], ..Default::default() };
    for (b, tokens) in batch.iter().enumerate() {
        let dense = forward_graph(&mut g, &bw, &state.model.config, tokens, 0, |_, _, _| Ok(LayerAttention::Causal))?;
        let anchor = loss_anchor_graph(&mut g, dense.logits, tokens)?;
        out.l_anchor += g.value(anchor).item();
        let mut terms = vec![(cfg.lambda_anchor, anchor)];
        if use_masked {
            let seed = derive_seed(cfg.policy.seed ^ cfg.seed, &format!("mask/{step}/{b}"));
            let fixed = fixed_masks(cfg, &state.model, &dense.probs, &g, tokens.len(), seed)?;
            let setup = MaskedPass { kind: cfg.policy.kind, tau: cfg.tau, routers: &routers, fixed };
            let masked = masked_pass(&mut g, &state.model, &bw, tokens, &setup)?;
            if cfg.lambda_mask > 0.0 {
                let lm = loss_mask_graph(&mut g, dense.logits, masked.logits)?;
                out.l_mask += g.value(lm).item();
                terms.push((cfg.lambda_mask, lm));
            }
            let mut budget_sites = Vec::with_capacity(n_sites);
            for (s, (p, mask)) in masked.sites.iter().enumerate() {
                let f = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
                let gv = match p {
                    Some(p) => g.mean(*p),
                    None => g.constant(Tensor::scalar(f)),
                };
                out.sites[s].0 += f;
                out.sites[s].1 += g.value(gv).item();
                budget_sites.push((f, gv));
            }
            if lambda_budget > 0.0 {
                let lb = loss_budget_graph(&mut g, &budget_sites, cfg.policy.rho)?;
                out.l_budget += g.value(lb).item();
                terms.push((lambda_budget, lb));
            }
        }
        totals.push(weighted_sum(&mut g, &terms)?);
    }
    let nb = batch.len() as f64;
    let mut total = totals[0];
    for &t in &totals[1..] {
        total = g.add(total, t)?;
    }
    let total = g.scale(total, 1.0 / nb);
    out.l_mask /= nb;
    out.l_anchor /= nb;
    out.l_budget /= nb;
    out.sites.iter_mut().for_each(|s| {
        s.0 /= nb;
        s.1 /= nb;
    });
    out.total = g.value(total).item();
    if !out.total.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss at step {step}: l_mask={} l_anchor={} l_budget={}",
            out.l_mask, out.l_anchor, out.l_budget
        )));
    }

    let grads_all = g.backward(total)?;
    let mut vars = bw.vars();
    for r in &routers {
        vars.extend(r.vars());
    }
    let mut grads: Vec<Tensor> = vars.iter().map(|&v| grads_all.wrt(v)).collect();
    out.grad_norm = global_norm(&grads);
    if !out.grad_norm.is_finite() {
        return Err(Error::Numerical(format!("non-finite gradient norm at step {step}")));
    }
    clip_global_norm(&mut grads, cfg.clip_norm);
    let adam = AdamWConfig { lr: lr_at(step, cfg), weight_decay: cfg.weight_decay, ..AdamWConfig::default() };
    let decay = state.decay_mask();
    let TrainState { model, routers, adam: moments, .. } = state;
    let mut params = model.weights.tensors_mut();
    routers.iter_mut().for_each(|r| params.extend(r.tensors_mut()));
    adamw_step(&mut params, &grads, moments, &adam, Some(&decay))?;
    state.step += 1;
    Ok(out)
}

fn weighted_sum(g: &mut Graph, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc = g.scale(terms[0].1, terms[0].0);
    for &(w, v) in &terms[1..] {
        let s = g.scale(v, w);
        acc = g.add(acc, s)?;
    }
    Ok(acc)
}

// ── Data and validation ─────────────────────────────────────────────────

/// Training batch for `step`, a pure function of `(seed, step)`.
pub fn sample_batch(tokens: &[usize], cfg: &TrainConfig, step: usize) -> Result<Vec<Vec<usize>>> {
    if tokens.len() < cfg.seq_len {
        return Err(Error::Precondition(format!("training split of {} tokens is shorter than one sequence", tokens.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("batch/{step}")));
    Ok((0..cfg.batch_size)
        .map(|_| {
            let start = rng.random_range(0..=tokens.len() - cfg.seq_len);
            tokens[start..start + cfg.seq_len].to_vec()
        })
        .collect())
}

/// Consecutive non-overlapping validation sequences.
pub fn validation_sequences(tokens: &[usize], seq_len: usize, count: usize) -> Vec<Vec<usize>> {
    tokens.chunks_exact(seq_len).take(count).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Validation {
    pub dense_nll: f64,
    /// `None` when no sparsified pass is configured.
    pub masked_nll: Option<f64>,
    pub f: Option<f64>,
}

/// Mean next-token NLL of the dense pass, and of the sparsified pass with
/// hard masks from the active policy.
pub fn validate(state: &TrainState, cfg: &TrainConfig, seqs: &[Vec<usize>]) -> Result<Validation> {
    let mut dense_sum = 0.0;
    let mut masked_sum = 0.0;
    let mut f_sum = 0.0;
    let use_masked = cfg.uses_masked_pass();
    for (i, tokens) in seqs.iter().enumerate() {
        let mut g = Graph::new();
        let bw = bind(&mut g, &state.model.weights, false);
        let routers: Vec<BoundRouter> = state.routers.iter().map(|r| bind_router(&mut g, r, false)).collect();
        let dense = forward_graph(&mut g, &bw, &state.model.config, tokens, 0, |_, _, _| Ok(LayerAttention::Causal))?;
        let l = loss_anchor_graph(&mut g, dense.logits, tokens)?;
        dense_sum += g.value(l).item();
        if use_masked {
            let seed = derive_seed(cfg.policy.seed ^ cfg.seed, &format!("val/{i}"));
            let fixed = fixed_masks(cfg, &state.model, &dense.probs, &g, tokens.len(), seed)?;
            let setup = MaskedPass { kind: cfg.policy.kind, tau: cfg.tau, routers: &routers, fixed };
            let masked = masked_pass(&mut g, &state.model, &bw, tokens, &setup)?;
            let l = loss_anchor_graph(&mut g, masked.logits, tokens)?;
            masked_sum += g.value(l).item();
            let kept: usize = masked.sites.iter().map(|(_, m)| m.iter().filter(|&&b| b).count()).sum();
            f_sum += kept as f64 / (masked.sites.len().max(1) * tokens.len()) as f64;
        }
    }
    let n = seqs.len().max(1) as f64;
    Ok(Validation { dense_nll: dense_sum / n, masked_nll: use_masked.then(|| masked_sum / n), f: use_masked.then(|| f_sum / n) })
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub lr: f64,
    pub l_mask: f64,
    pub l_anchor: f64,
    pub l_budget: f64,
    pub total: f64,
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "G")]
    pub g: f64,
    pub val_dense_nll: f64,
    pub val_masked_nll: Option<f64>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const STATE_FILE: &str = "state.kvcat";
pub const MODEL_FILE: &str = "model.kvcat";

/// Trains until `cfg.total_steps`, appending to `out_dir/metrics.jsonl`
/// every `log_interval` steps and saving resumable state every
/// `checkpoint_interval` steps. A fresh state (step 0) truncates the log.
pub fn train_run(
    cfg: &TrainConfig,
    mut state: TrainState,
    train: &[usize],
    val: &[usize],
    out_dir: &Path,
    mut on_log: impl FnMut(&MetricsRecord),
) -> Result<TrainState> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let val_seqs = validation_sequences(val, cfg.seq_len, cfg.val_sequences);
    if val_seqs.is_empty() {
        return Err(Error::Precondition("validation split is shorter than one sequence".into()));
    }
    let log_path = out_dir.join(METRICS_FILE);
    let file = if state.step == 0 { File::create(&log_path) } else { OpenOptions::new().append(true).create(true).open(&log_path) }
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    while state.step < cfg.total_steps {
        let lr = lr_at(state.step, cfg);
        let batch = sample_batch(train, cfg, state.step)?;
        let loss = train_step(&mut state, &batch, cfg)?;
        if state.step % cfg.log_interval == 0 {
            let v = validate(&state, cfg, &val_seqs)?;
            let rec = MetricsRecord {
                step: state.step,
                lr,
                l_mask: loss.l_mask,
                l_anchor: loss.l_anchor,
                l_budget: loss.l_budget,
                total: loss.total,
                f: loss.mean_f(),
                g: loss.mean_g(),
                val_dense_nll: v.dense_nll,
                val_masked_nll: v.masked_nll,
            };
            let line = serde_json::to_string(&rec).expect("plain record serializes");
            writeln!(log, "{line}").and_then(|_| log.flush()).map_err(|e| Error::io(&log_path, e))?;
            on_log(&rec);
        }
        if cfg.checkpoint_interval > 0 && state.step % cfg.checkpoint_interval == 0 {
            state.save(&out_dir.join(STATE_FILE))?;
        }
    }
    state.save(&out_dir.join(STATE_FILE))?;
    crate::model::save_checkpoint(&state.model, &out_dir.join(MODEL_FILE))?;
    Ok(state)
}

#[cfg(test)]
mod tests;
