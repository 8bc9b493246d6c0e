use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub attn_gain: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_gain: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// All trainable tensors of the transformer, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerWeights {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Tensor,
    pub head: Tensor,
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("valid shape")
}

/// Deterministic scaled-Gaussian initialization.
///
/// Matrices and embeddings use std 0.02; the two residual output
/// projections (`wo`, `w2`) use 0.02 / sqrt(n_layers). Gains start at 1 and
/// biases at 0.
pub fn init_weights(cfg: &ModelConfig, seed: u64) -> Result<TransformerWeights> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let resid_std = INIT_STD / (cfg.n_layers as f64).sqrt();
    let tok_emb = gaussian(&mut rng, &[cfg.vocab_size, d], INIT_STD);
    let pos_emb = gaussian(&mut rng, &[cfg.max_seq_len, d], INIT_STD);
    let layers = (0..cfg.n_layers)
        .map(|_| LayerWeights {
            attn_gain: Tensor::full(&[d], 1.0),
            wq: gaussian(&mut rng, &[d, d], INIT_STD),
            wk: gaussian(&mut rng, &[d, d], INIT_STD),
            wv: gaussian(&mut rng, &[d, d], INIT_STD),
            wo: gaussian(&mut rng, &[d, d], resid_std),
            mlp_gain: Tensor::full(&[d], 1.0),
            w1: gaussian(&mut rng, &[d, f], INIT_STD),
            b1: Tensor::zeros(&[f]),
            w2: gaussian(&mut rng, &[f, d], resid_std),
            b2: Tensor::zeros(&[d]),
        })
        .collect();
    Ok(TransformerWeights {
        tok_emb,
        pos_emb,
        layers,
        final_gain: Tensor::full(&[d], 1.0),
        head: gaussian(&mut rng, &[d, cfg.vocab_size], INIT_STD),
    })
}

impl TransformerWeights {
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (l, lw) in self.layers.iter().enumerate() {
            for (name, t) in lw.fields() {
                out.push((format!("layer{l}.{name}"), t));
            }
        }
        out.push(("final_gain".into(), &self.final_gain));
        out.push(("head".into(), &self.head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for lw in &mut self.layers {
            out.extend([
                &mut lw.attn_gain,
                &mut lw.wq,
                &mut lw.wk,
                &mut lw.wv,
                &mut lw.wo,
                &mut lw.mlp_gain,
                &mut lw.w1,
                &mut lw.b1,
                &mut lw.w2,
                &mut lw.b2,
            ]);
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.head);
        out
    }

    /// Rebuilds weights from named tensors, checking every shape against `cfg`.
    pub fn from_named(cfg: &ModelConfig, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<Self> {
        let mut tensors = Vec::new();
        for (name, shape) in init_shapes(cfg) {
            let t = lookup(&name).ok_or_else(|| Error::Format(format!("missing array `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!("array `{name}` has shape {:?}, expected {shape:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::Format(format!("array `{name}` has non-finite values")));
            }
            tensors.push(t);
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("one tensor per reference shape");
        let tok_emb = next();
        let pos_emb = next();
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights {
                attn_gain: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                mlp_gain: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            })
            .collect();
        let final_gain = next();
        let head = next();
        Ok(TransformerWeights { tok_emb, pos_emb, layers, final_gain, head })
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    /// Whether the tensor is a matrix that weight decay applies to.
    pub fn decay_mask(&self) -> Vec<bool> {
        self.named().iter().map(|(_, t)| t.shape().len() == 2).collect()
    }

    pub fn checksum(&self) -> u64 {
        self.named().iter().fold(0u64, |acc, (_, t)| acc.rotate_left(7) ^ t.checksum())
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

impl LayerWeights {
    fn fields(&self) -> [(&'static str, &Tensor); 10] {
        [
            ("attn_gain", &self.attn_gain),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("mlp_gain", &self.mlp_gain),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }
}

fn init_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let mut out = vec![("tok_emb".to_string(), vec![v, d]), ("pos_emb".to_string(), vec![cfg.max_seq_len, d])];
    for l in 0..cfg.n_layers {
        for (name, shape) in [
            ("attn_gain", vec![d]),
            ("wq", vec![d, d]),
            ("wk", vec![d, d]),
            ("wv", vec![d, d]),
            ("wo", vec![d, d]),
            ("mlp_gain", vec![d]),
            ("w1", vec![d, f]),
            ("b1", vec![f]),
            ("w2", vec![f, d]),
            ("b2", vec![d]),
        ] {
            out.push((format!("layer{l}.{name}"), shape));
        }
    }
    out.push(("final_gain".into(), vec![d]));
    out.push(("head".into(), vec![d, v]));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { vocab_size: 11, d_model: 8, n_layers: 2, n_heads: 2, d_ff: 16, max_seq_len: 12, router_layers: vec![0], seed: 0 }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = init_weights(&small(), 4).unwrap();
        let b = init_weights(&small(), 4).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), init_weights(&small(), 5).unwrap().checksum());
    }

    #[test]
    fn init_values_are_small_and_finite() {
        let w = init_weights(&ModelConfig::default(), 0).unwrap();
        for (name, t) in w.named() {
            assert!(t.data().iter().all(|v| v.is_finite() && v.abs() <= 1.0), "{name}");
        }
    }

    #[test]
    fn named_order_matches_mutable_order() {
        let mut w = init_weights(&small(), 1).unwrap();
        let shapes: Vec<Vec<usize>> = w.named().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let mut_shapes: Vec<Vec<usize>> = w.tensors_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, mut_shapes);
        assert_eq!(init_shapes(&small()).into_iter().map(|(_, s)| s).collect::<Vec<_>>(), shapes);
    }
}
