//! Per-token keep policies for train-time KV sparsification: the learned
//! linear-attention router and the random / attention-mass baselines.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{causal_mask, Graph, Tensor, Var};
use crate::error::{shape_err, Error, Result};

pub const DEFAULT_D_R: usize = 64;
pub const DEFAULT_TAU: f64 = 0.5;
pub const EPS_DEN: f64 = 1e-6;
const NORM_EPS: f64 = 1e-5;

/// Number of slots kept at rate `rho` out of `n`, i.e. `ceil(rho * n)`.
/// A small slack keeps products like `0.1 * 30` from rounding up.
pub fn keep_count(rho: f64, n: usize) -> usize {
    ((rho * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Learned scorer. Row-vector convention: projections act as `h · W`.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub wp: Tensor,
    /// `[1]`
    pub alpha: Tensor,
    pub eps_den: f64,
    pub tau: f64,
}

impl RouterParams {
    /// `W_P = -I` and `alpha = 0`, so every token starts with `p = 1`.
    pub fn init(d_model: usize, d_r: usize, tau: f64, seed: u64) -> Result<Self> {
        if d_model == 0 || d_r == 0 {
            return Err(Error::Config("router dimensions must be positive".into()));
        }
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::Config(format!("router threshold {tau} outside (0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |r: usize, c: usize, std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            Tensor::matrix(r, c, (0..r * c).map(|_| normal.sample(&mut rng)).collect()).expect("positive dims")
        };
        let s_in = 1.0 / (d_model as f64).sqrt();
        let s_out = 1.0 / (d_r as f64).sqrt();
        let wq = gauss(d_model, d_r, s_in);
        let wk = gauss(d_model, d_r, s_in);
        let wv = gauss(d_model, d_r, s_in);
        let wo = gauss(d_r, d_model, s_out);
        let mut wp = Tensor::identity(d_model);
        wp.data_mut().iter_mut().for_each(|v| *v = -*v);
        Ok(RouterParams { wq, wk, wv, wo, wp, alpha: Tensor::zeros(&[1]), eps_den: EPS_DEN, tau })
    }

    pub fn d_r(&self) -> usize {
        self.wq.cols()
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo), ("wp", &self.wp), ("alpha", &self.alpha)]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo, &mut self.wp, &mut self.alpha]
    }
}

pub(crate) struct BoundRouter {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub wp: Var,
    pub alpha: Var,
    pub eps_den: f64,
}

impl BoundRouter {
    pub fn vars(&self) -> [Var; 6] {
        [self.wq, self.wk, self.wv, self.wo, self.wp, self.alpha]
    }
}

pub(crate) fn bind_router(g: &mut Graph, p: &RouterParams, trainable: bool) -> BoundRouter {
    let mut leaf = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
    BoundRouter {
        wq: leaf(&p.wq),
        wk: leaf(&p.wk),
        wv: leaf(&p.wv),
        wo: leaf(&p.wo),
        wp: leaf(&p.wp),
        alpha: leaf(&p.alpha),
        eps_den: p.eps_den,
    }
}

/// Keep scores `[T x 1]` for hidden states `h` `[T x d_model]`.
pub(crate) fn router_scores_graph(g: &mut Graph, r: &BoundRouter, h: Var) -> Result<Var> {
    let t = g.value(h).rows();
    let hn = g.rms_norm(h, None, NORM_EPS)?;
    let q = g.matmul(hn, r.wq)?;
    let q = g.elu_plus_one(q);
    let k = g.matmul(hn, r.wk)?;
    let k = g.elu_plus_one(k);
    let v = g.matmul(hn, r.wv)?;
    // Causal linear attention: row t uses S_t = sum_{j<=t} k_j v_j^T and
    // z_t = sum_{j<=t} k_j, written as a lower-triangular product.
    let qk = g.matmul_t(q, k, false, true)?;
    let tril = causal_mask(t, t, 0).iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let tril = g.constant(Tensor::matrix(t, t, tril)?);
    let a = g.mul(qk, tril)?;
    let num = g.matmul(a, v)?;
    let den = g.row_sum(a);
    let den = g.affine(den, 1.0, r.eps_den);
    let ctx = g.div_rows(num, den)?;
    let ctx = g.matmul(ctx, r.wo)?;
    let u = g.matmul(h, r.wp)?;
    let u = g.row_normalize(u)?;
    let mixed = g.mul_scalar(ctx, r.alpha)?;
    let w = g.add(h, mixed)?;
    let w = g.row_normalize(w)?;
    let cos = g.row_dot(u, w)?;
    let p = g.affine(cos, -0.5, 0.5);
    Ok(g.clamp_pass(p, 0.0, 1.0))
}

/// Keep scores in `[0, 1]` for each row of `hidden`.
pub fn router_scores(params: &RouterParams, hidden: &Tensor) -> Result<Vec<f64>> {
    if hidden.shape().len() != 2 || hidden.cols() != params.wq.rows() {
        return Err(shape_err!("router input {:?} for d_model {}", hidden.shape(), params.wq.rows()));
    }
    let mut g = Graph::new();
    let r = bind_router(&mut g, params, false);
    let h = g.constant(hidden.clone());
    let p = router_scores_graph(&mut g, &r, h)?;
    Ok(g.value(p).data().to_vec())
}

/// Hard mask `p > tau` and the forward value of the straight-through gate,
/// which equals the mask exactly.
pub fn ste_gate(p: &[f64], tau: f64) -> (Vec<bool>, Vec<f64>) {
    let mask: Vec<bool> = p.iter().map(|&v| v > tau).collect();
    let gate = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    (mask, gate)
}

/// Multiplies unnormalized weights `exp(s)` by the key gates (each query's
/// own slot, the last `T_q` keys in order, forced to 1) and renormalizes.
pub fn apply_gate_to_attention(scores: &Tensor, gate: &[f64]) -> Result<Tensor> {
    let (tq, tk) = (scores.rows(), scores.cols());
    if gate.len() != tk || tq > tk {
        return Err(shape_err!("gate of length {} for [{tq}x{tk}] scores", gate.len()));
    }
    let offset = tk - tq;
    let mut out = vec![0.0; tq * tk];
    for i in 0..tq {
        let row = scores.row(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for j in 0..tk {
            let g = if j == offset + i { 1.0 } else { gate[j] };
            out[i * tk + j] = (row[j] - mx).exp() * g;
            s += out[i * tk + j];
        }
        if s <= 0.0 {
            return Err(Error::Precondition(format!("attention row {i} has zero mass after gating")));
        }
        out[i * tk..(i + 1) * tk].iter_mut().for_each(|v| *v /= s);
    }
    Tensor::matrix(tq, tk, out)
}

/// Per-step router statistics at one site.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterTrace {
    pub p: Vec<f64>,
    pub mask: Vec<bool>,
    /// Realized keep fraction.
    pub f: f64,
    /// Mean keep score.
    pub g: f64,
}

impl RouterTrace {
    pub fn new(p: Vec<f64>, tau: f64) -> Self {
        let (mask, _) = ste_gate(&p, tau);
        Self::from_mask(p, mask)
    }

    pub fn from_mask(p: Vec<f64>, mask: Vec<bool>) -> Self {
        let n = mask.len().max(1) as f64;
        let f = mask.iter().filter(|&&b| b).count() as f64 / n;
        let g = p.iter().sum::<f64>() / n;
        RouterTrace { p, mask, f, g }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyKind {
    Router,
    Rand,
    Attn,
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "router" => Ok(PolicyKind::Router),
            "rand" => Ok(PolicyKind::Rand),
            "attn" => Ok(PolicyKind::Attn),
            _ => Err(Error::Config(format!("unknown policy `{s}` (expected router, rand or attn)"))),
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::Router => "router",
            PolicyKind::Rand => "rand",
            PolicyKind::Attn => "attn",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsificationPolicy {
    pub kind: PolicyKind,
    pub rho: f64,
    pub seed: u64,
}

impl SparsificationPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Config(format!("target keep rate {} outside (0, 1)", self.rho)));
        }
        Ok(())
    }
}

/// Exactly `ceil(rho * t)` kept slots, uniform over subsets.
pub fn rand_policy(t: usize, rho: f64, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![false; t];
    for i in rand::seq::index::sample(&mut rng, t, keep_count(rho, t)) {
        mask[i] = true;
    }
    mask
}

/// Keeps the `ceil(rho * T)` sources receiving the most attention mass,
/// summed over heads and query positions. Ties go to the earlier index.
pub fn attn_policy(probs: &[&Tensor], rho: f64) -> Result<Vec<bool>> {
    let first = probs.first().ok_or_else(|| Error::Precondition("attention policy needs at least one head".into()))?;
    let t = first.cols();
    let mut mass = vec![0.0; t];
    for p in probs {
        if p.cols() != t {
            return Err(shape_err!("attention heads disagree on key count"));
        }
        for i in 0..p.rows() {
            for (m, v) in mass.iter_mut().zip(p.row(i)) {
                *m += v;
            }
        }
    }
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| mass[b].total_cmp(&mass[a]).then(a.cmp(&b)));
    let mut mask = vec![false; t];
    for &j in &order[..keep_count(rho, t)] {
        mask[j] = true;
    }
    Ok(mask)
}

#[cfg(test)]
mod tests;
