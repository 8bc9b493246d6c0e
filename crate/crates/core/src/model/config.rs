use crate::error::{Error, Result};

/// Hyperparameters of the toy decoder-only transformer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Number of learned absolute positions.
    pub max_seq_len: usize,
    /// Layers where a sparsification mask takes effect; the mask produced at
    /// a site covers every layer until the next site.
    pub router_layers: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: crate::eval::tokenizer::VOCAB_SIZE,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_seq_len: 256,
            router_layers: vec![0, 2],
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if self.router_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("router_layers must be strictly increasing".into()));
        }
        if let Some(&l) = self.router_layers.iter().find(|&&l| l >= self.n_layers) {
            return Err(Error::Config(format!("router layer {l} is not below n_layers {}", self.n_layers)));
        }
        Ok(())
    }

    /// Router site governing `layer`, if any site precedes it.
    pub fn router_site_for(&self, layer: usize) -> Option<usize> {
        self.router_layers.iter().rposition(|&l| l <= layer)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let layers = self.router_layers.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("d_model".into(), self.d_model.to_string()),
            ("n_layers".into(), self.n_layers.to_string()),
            ("n_heads".into(), self.n_heads.to_string()),
            ("d_ff".into(), self.d_ff.to_string()),
            ("max_seq_len".into(), self.max_seq_len.to_string()),
            ("router_layers".into(), layers),
            ("seed".into(), self.seed.to_string()),
        ]
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
            pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Format(format!("checkpoint header lacks `{key}`")))
        };
        let num = |key: &str| -> Result<usize> { get(key)?.parse().map_err(|_| Error::Format(format!("bad value for `{key}`"))) };
        let layers = get("router_layers")?;
        let router_layers = if layers.is_empty() {
            Vec::new()
        } else {
            layers.split(',').map(|s| s.parse().map_err(|_| Error::Format("bad router_layers".into()))).collect::<Result<_>>()?
        };
        let cfg = ModelConfig {
            vocab_size: num("vocab_size")?,
            d_model: num("d_model")?,
            n_layers: num("n_layers")?,
            n_heads: num("n_heads")?,
            d_ff: num("d_ff")?,
            max_seq_len: num("max_seq_len")?,
            router_layers,
            seed: get("seed")?.parse().map_err(|_| Error::Format("bad seed".into()))?,
        };
        cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(cfg)
    }
}
