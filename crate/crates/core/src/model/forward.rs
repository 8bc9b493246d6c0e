//! Graph construction for the dense, masked and compressed-prefix passes.
//!
//! All three passes share [`forward_graph`]; they differ only in which keys
//! each query may see, which is decided per layer by a callback.

use std::rc::Rc;

use super::{ModelConfig, TransformerWeights};
use crate::autodiff::{causal_mask, Graph, SoftmaxSpec, Tensor, Var};
use crate::error::{shape_err, Error, Result};

pub(crate) const RMS_EPS: f64 = 1e-5;

pub(crate) struct BoundLayer {
    pub attn_gain: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub mlp_gain: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Weights placed into a graph, either as trainable leaves or constants.
pub(crate) struct BoundWeights {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<BoundLayer>,
    pub final_gain: Var,
    pub head: Var,
}

impl BoundWeights {
    /// Leaves in the same order as [`TransformerWeights::named`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            out.extend([l.attn_gain, l.wq, l.wk, l.wv, l.wo, l.mlp_gain, l.w1, l.b1, l.w2, l.b2]);
        }
        out.push(self.final_gain);
        out.push(self.head);
        out
    }
}

pub(crate) fn bind(g: &mut Graph, w: &TransformerWeights, trainable: bool) -> BoundWeights {
    let mut leaf = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
    let tok_emb = leaf(&w.tok_emb);
    let pos_emb = leaf(&w.pos_emb);
    let layers = w
        .layers
        .iter()
        .map(|lw| BoundLayer {
            attn_gain: leaf(&lw.attn_gain),
            wq: leaf(&lw.wq),
            wk: leaf(&lw.wk),
            wv: leaf(&lw.wv),
            wo: leaf(&lw.wo),
            mlp_gain: leaf(&lw.mlp_gain),
            w1: leaf(&lw.w1),
            b1: leaf(&lw.b1),
            w2: leaf(&lw.w2),
            b2: leaf(&lw.b2),
        })
        .collect();
    let final_gain = leaf(&w.final_gain);
    let head = leaf(&w.head);
    BoundWeights { tok_emb, pos_emb, layers, final_gain, head }
}

/// Key visibility for one layer.
pub(crate) enum LayerAttention {
    /// Full causal attention over the processed tokens.
    Causal,
    /// Causal attention restricted to `visible`, with the unnormalized
    /// weights multiplied by `gate` (self slot pinned open).
    Gated { gate: Var, visible: Rc<Vec<bool>> },
    /// Processed tokens follow `slots` compact prefix entries per head that
    /// every query may see, with an optional per-slot logit bias.
    Prefix { slots: usize, keys: Vec<Var>, values: Vec<Var>, bias: Vec<Option<Rc<Vec<f64>>>> },
}

pub(crate) struct GraphForward {
    pub logits: Var,
    /// Residual stream entering each layer.
    pub layer_inputs: Vec<Var>,
    /// Per layer, per head `[T x d_head]`.
    pub queries: Vec<Vec<Var>>,
    pub keys: Vec<Vec<Var>>,
    pub values: Vec<Vec<Var>>,
    /// Per layer, per head attention probabilities `[T x keys]`.
    pub probs: Vec<Vec<Var>>,
}

/// Visibility for a per-token keep mask: query `i` sees `j <= i` when
/// `keep[j]`, and always sees itself.
pub(crate) fn masked_visibility(keep: &[bool]) -> Rc<Vec<bool>> {
    let t = keep.len();
    let mut vis = vec![false; t * t];
    for i in 0..t {
        for j in 0..=i {
            vis[i * t + j] = keep[j] || j == i;
        }
    }
    Rc::new(vis)
}

pub(crate) fn forward_graph(
    g: &mut Graph,
    bw: &BoundWeights,
    cfg: &ModelConfig,
    tokens: &[usize],
    pos_offset: usize,
    mut attention: impl FnMut(&mut Graph, usize, Var) -> Result<LayerAttention>,
) -> Result<GraphForward> {
    let t = tokens.len();
    if t == 0 {
        return Err(Error::Precondition("forward pass over zero tokens".into()));
    }
    if pos_offset + t > cfg.max_seq_len {
        return Err(Error::Precondition(format!("positions {pos_offset}..{} exceed max_seq_len {}", pos_offset + t, cfg.max_seq_len)));
    }
    let dh = cfg.d_head();
    let scale = 1.0 / (dh as f64).sqrt();
    let positions: Vec<usize> = (pos_offset..pos_offset + t).collect();
    let tok = g.gather_rows(bw.tok_emb, tokens)?;
    let pos = g.gather_rows(bw.pos_emb, &positions)?;
    let mut x = g.add(tok, pos)?;
    let causal = causal_mask(t, t, 0);

    let n_layers = bw.layers.len();
    let mut out = GraphForward {
        logits: x,
        layer_inputs: Vec::with_capacity(n_layers),
        queries: Vec::with_capacity(n_layers),
        keys: Vec::with_capacity(n_layers),
        values: Vec::with_capacity(n_layers),
        probs: Vec::with_capacity(n_layers),
    };
    for (l, lw) in bw.layers.iter().enumerate() {
        out.layer_inputs.push(x);
        let mode = attention(g, l, x)?;
        let h = g.rms_norm(x, Some(lw.attn_gain), RMS_EPS)?;
        let q = g.matmul(h, lw.wq)?;
        let k = g.matmul(h, lw.wk)?;
        let v = g.matmul(h, lw.wv)?;
        let (mut qs, mut ks, mut vs, mut ps, mut heads) = (vec![], vec![], vec![], vec![], vec![]);
        for head in 0..cfg.n_heads {
            let qh = g.slice_cols(q, head * dh, dh)?;
            let kh = g.slice_cols(k, head * dh, dh)?;
            let vh = g.slice_cols(v, head * dh, dh)?;
            let (scores_keys, scores_values, gate, spec) = match &mode {
                LayerAttention::Causal => (kh, vh, None, SoftmaxSpec::new(scale).with_mask(causal.clone())),
                LayerAttention::Gated { gate, visible } => {
                    (kh, vh, Some(*gate), SoftmaxSpec::new(scale).with_mask(visible.clone()).with_self_slot(0))
                }
                LayerAttention::Prefix { slots, keys, values, bias } => {
                    let mut spec = SoftmaxSpec::new(scale).with_mask(causal_mask(t, slots + t, *slots));
                    if let Some(b) = &bias[head] {
                        let mut full = b.as_ref().clone();
                        full.resize(slots + t, 0.0);
                        spec = spec.with_col_bias(Rc::new(full));
                    }
                    if *slots == 0 {
                        (kh, vh, None, spec)
                    } else {
                        let kk = g.concat_rows(&[keys[head], kh])?;
                        let vv = g.concat_rows(&[values[head], vh])?;
                        (kk, vv, None, spec)
                    }
                }
            };
            let scores = g.matmul_t(qh, scores_keys, false, true)?;
            let p = g.softmax(scores, gate, spec)?;
            let o = g.matmul(p, scores_values)?;
            qs.push(qh);
            ks.push(kh);
            vs.push(vh);
            ps.push(p);
            heads.push(o);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let attn = g.matmul(cat, lw.wo)?;
        x = g.add(x, attn)?;
        let h2 = g.rms_norm(x, Some(lw.mlp_gain), RMS_EPS)?;
        let f = g.matmul(h2, lw.w1)?;
        let f = g.add_row(f, lw.b1)?;
        let f = g.gelu(f);
        let f = g.matmul(f, lw.w2)?;
        let f = g.add_row(f, lw.b2)?;
        x = g.add(x, f)?;
        out.queries.push(qs);
        out.keys.push(ks);
        out.values.push(vs);
        out.probs.push(ps);
    }
    let hf = g.rms_norm(x, Some(bw.final_gain), RMS_EPS)?;
    out.logits = g.matmul(hf, bw.head)?;
    Ok(out)
}

/// Dense per-layer, per-head key/value cache.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    pub len: usize,
    /// `[layer][head]`, each `[len x d_head]`.
    pub keys: Vec<Vec<Tensor>>,
    pub values: Vec<Vec<Tensor>>,
}

impl KvCache {
    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn n_heads(&self) -> usize {
        self.keys.first().map_or(0, Vec::len)
    }

    /// The first `n` slots of every layer and head.
    pub fn prefix(&self, n: usize) -> Result<KvCache> {
        if n == 0 || n > self.len {
            return Err(shape_err!("cannot take a {n}-slot prefix of a {}-slot cache", self.len));
        }
        let cut = |t: &Tensor| Tensor::matrix(n, t.cols(), t.data()[..n * t.cols()].to_vec());
        let map =
            |side: &Vec<Vec<Tensor>>| -> Result<Vec<Vec<Tensor>>> { side.iter().map(|heads| heads.iter().map(cut).collect()).collect() };
        Ok(KvCache { len: n, keys: map(&self.keys)?, values: map(&self.values)? })
    }
}

/// Query states and attention rows for positions `start..T`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnTrace {
    pub start: usize,
    /// `[layer][head]`, each `[T - start x d_head]`.
    pub queries: Vec<Vec<Tensor>>,
    /// `[layer][head]`, each `[T - start x T]`.
    pub probs: Vec<Vec<Tensor>>,
}

#[derive(Clone, Debug)]
pub struct DenseOutput {
    pub logits: Tensor,
    pub cache: KvCache,
    pub trace: Option<AttnTrace>,
}

/// Compact replacement for a dense prefix cache.
#[derive(Clone, Debug, PartialEq)]
pub struct CompactHead {
    /// `[slots x d_head]`, row-major.
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
    /// Per-slot additive logit bias; present only for attention matching.
    pub bias: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedPrefixCache {
    pub prefix_len: usize,
    pub slots: usize,
    pub d_head: usize,
    /// `[layer][head]`.
    pub heads: Vec<Vec<CompactHead>>,
}

impl CompressedPrefixCache {
    /// The identity compression: every dense slot kept, no bias.
    pub fn from_dense(cache: &KvCache) -> Self {
        let d_head = cache.keys[0][0].cols();
        let heads = cache
            .keys
            .iter()
            .zip(&cache.values)
            .map(|(ks, vs)| {
                ks.iter().zip(vs).map(|(k, v)| CompactHead { keys: k.data().to_vec(), values: v.data().to_vec(), bias: None }).collect()
            })
            .collect();
        CompressedPrefixCache { prefix_len: cache.len, slots: cache.len, d_head, heads }
    }

    pub fn has_bias(&self) -> bool {
        self.heads.iter().flatten().any(|h| h.bias.is_some())
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.heads.len() != cfg.n_layers || self.heads.iter().any(|l| l.len() != cfg.n_heads) {
            return Err(shape_err!("compact cache layout does not match {} layers x {} heads", cfg.n_layers, cfg.n_heads));
        }
        if self.d_head != cfg.d_head() {
            return Err(shape_err!("compact cache d_head {} vs model {}", self.d_head, cfg.d_head()));
        }
        if self.slots > self.prefix_len {
            return Err(Error::Budget { requested: self.slots, available: self.prefix_len });
        }
        let n = self.slots * self.d_head;
        for h in self.heads.iter().flatten() {
            if h.keys.len() != n || h.values.len() != n || h.bias.as_ref().is_some_and(|b| b.len() != self.slots) {
                return Err(shape_err!("compact head does not hold {} slots", self.slots));
            }
        }
        Ok(())
    }
}

/// Model configuration together with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: TransformerWeights,
}

impl Model {
    pub fn new(config: ModelConfig, weights: TransformerWeights) -> Self {
        Model { config, weights }
    }

    pub fn init(config: ModelConfig) -> Result<Self> {
        let weights = super::init_weights(&config, config.seed)?;
        Ok(Model { config, weights })
    }

    /// Dense causal pass. With `trace_from = Some(s)`, also records query
    /// states and attention rows for positions `s..T`.
    pub fn forward_dense(&self, tokens: &[usize], trace_from: Option<usize>) -> Result<DenseOutput> {
        if let Some(s) = trace_from {
            if s >= tokens.len() {
                return Err(shape_err!("trace start {s} beyond {} tokens", tokens.len()));
            }
        }
        let mut g = Graph::new();
        let bw = bind(&mut g, &self.weights, false);
        let fw = forward_graph(&mut g, &bw, &self.config, tokens, 0, |_, _, _| Ok(LayerAttention::Causal))?;
        let grab =
            |vars: &Vec<Vec<Var>>| -> Vec<Vec<Tensor>> { vars.iter().map(|hs| hs.iter().map(|&v| g.value(v).clone()).collect()).collect() };
        let cache = KvCache { len: tokens.len(), keys: grab(&fw.keys), values: grab(&fw.values) };
        let trace = trace_from.map(|s| {
            let rows = |vars: &Vec<Vec<Var>>| -> Vec<Vec<Tensor>> {
                vars.iter()
                    .map(|hs| {
                        hs.iter()
                            .map(|&v| {
                                let t = g.value(v);
                                let c = t.cols();
                                Tensor::matrix(t.rows() - s, c, t.data()[s * c..].to_vec()).expect("non-empty")
                            })
                            .collect()
                    })
                    .collect()
            };
            AttnTrace { start: s, queries: rows(&fw.queries), probs: rows(&fw.probs) }
        });
        Ok(DenseOutput { logits: g.value(fw.logits).clone(), cache, trace })
    }

    /// Pass where each router site's keep mask restricts which past slots
    /// the layers of its group may attend to.
    pub fn forward_masked(&self, tokens: &[usize], masks: &[Vec<bool>]) -> Result<Tensor> {
        let cfg = &self.config;
        if masks.len() != cfg.router_layers.len() {
            return Err(shape_err!("{} masks for {} router sites", masks.len(), cfg.router_layers.len()));
        }
        if let Some(m) = masks.iter().find(|m| m.len() != tokens.len()) {
            return Err(shape_err!("mask of length {} for {} tokens", m.len(), tokens.len()));
        }
        let mut g = Graph::new();
        let bw = bind(&mut g, &self.weights, false);
        let gates: Vec<(Var, Rc<Vec<bool>>)> = masks
            .iter()
            .map(|m| {
                let vals = m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                let gate = g.constant(Tensor::new(vec![m.len()], vals).expect("non-empty"));
                (gate, masked_visibility(m))
            })
            .collect();
        let fw = forward_graph(&mut g, &bw, cfg, tokens, 0, |_, layer, _| {
            Ok(match cfg.router_site_for(layer) {
                Some(site) => {
                    let (gate, visible) = &gates[site];
                    LayerAttention::Gated { gate: *gate, visible: visible.clone() }
                }
                None => LayerAttention::Causal,
            })
        })?;
        Ok(g.value(fw.logits).clone())
    }

    /// Suffix logits when the prefix cache is replaced by `compressed`.
    /// Suffix tokens sit at absolute positions `prefix_len..prefix_len + k`.
    pub fn forward_with_compressed_prefix(
        &self,
        compressed: &CompressedPrefixCache,
        suffix: &[usize],
        prefix_len: usize,
    ) -> Result<Tensor> {
        if suffix.is_empty() && compressed.slots == 0 {
            return Err(Error::Precondition("empty attention: no compact slots and no suffix".into()));
        }
        if suffix.is_empty() {
            return Err(Error::Precondition("compressed forward needs at least one suffix token".into()));
        }
        compressed.validate(&self.config)?;
        if compressed.slots > prefix_len {
            return Err(Error::Budget { requested: compressed.slots, available: prefix_len });
        }
        let mut g = Graph::new();
        let bw = bind(&mut g, &self.weights, false);
        let layers = compact_leaves(&mut g, compressed, false);
        let fw = forward_graph(&mut g, &bw, &self.config, suffix, prefix_len, |_, l, _| Ok(layers[l].to_attention()))?;
        Ok(g.value(fw.logits).clone())
    }
}

/// Compact slots of one layer bound into a graph.
pub(crate) struct CompactLayerVars {
    pub slots: usize,
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
    pub bias: Vec<Option<Rc<Vec<f64>>>>,
}

impl CompactLayerVars {
    pub fn to_attention(&self) -> LayerAttention {
        LayerAttention::Prefix { slots: self.slots, keys: self.keys.clone(), values: self.values.clone(), bias: self.bias.clone() }
    }
}

pub(crate) fn compact_leaves(g: &mut Graph, c: &CompressedPrefixCache, trainable: bool) -> Vec<CompactLayerVars> {
    c.heads
        .iter()
        .map(|heads| {
            let mut layer = CompactLayerVars { slots: c.slots, keys: vec![], values: vec![], bias: vec![] };
            for h in heads {
                if c.slots > 0 {
                    let k = Tensor::matrix(c.slots, c.d_head, h.keys.clone()).expect("validated");
                    let v = Tensor::matrix(c.slots, c.d_head, h.values.clone()).expect("validated");
                    let (k, v) = if trainable { (g.param(k), g.param(v)) } else { (g.constant(k), g.constant(v)) };
                    layer.keys.push(k);
                    layer.values.push(v);
                }
                layer.bias.push(h.bias.clone().map(Rc::new));
            }
            layer
        })
        .collect()
}
