//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key has a default, so an
//! empty file is a valid configuration. Randomness flows from `seed`: each
//! component draws `derive_seed(seed, name)` with the names listed in
//! [`RunConfig::component_seed`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::compress::{AmConfig, CompactOptConfig};
use crate::error::{Error, Result};
use crate::eval::{CorpusKind, Method};
use crate::model::ModelConfig;
use crate::router::{PolicyKind, SparsificationPolicy};
use crate::seed::derive_seed;
use crate::training::TrainConfig;

pub const SNAPSHOT_FILE: &str = "config.txt";

/// `(key, default, description)` in snapshot order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "root seed"),
    ("workers", "0", "worker threads, 0 for one per core; KVCAT_WORKERS overrides"),
    ("corpus_path", "", "byte corpus file; empty generates a synthetic corpus"),
    ("corpus_kind", "template", "synthetic corpus generator: template or markov"),
    ("corpus_bytes", "400000", "synthetic corpus size"),
    ("val_fraction", "0.05", "held-out tail of the corpus"),
    ("init_checkpoint", "", "model to continue training from; empty starts from random weights"),
    ("model.d_model", "128", ""),
    ("model.n_layers", "4", ""),
    ("model.n_heads", "4", ""),
    ("model.d_ff", "512", ""),
    ("model.max_seq_len", "256", ""),
    ("model.router_layers", "0,2", "comma-separated router sites"),
    ("train.lambda_mask", "1", ""),
    ("train.lambda_anchor", "1", ""),
    ("train.lambda_budget", "0.1", ""),
    ("train.policy", "router", "router, rand or attn"),
    ("train.rho", "0.5", "target keep rate"),
    ("train.d_r", "64", "router hidden width"),
    ("train.tau", "0.5", "router gate threshold"),
    ("train.peak_lr", "1e-4", ""),
    ("train.min_lr", "5e-6", ""),
    ("train.warmup_steps", "600", ""),
    ("train.total_steps", "2000", ""),
    ("train.seq_len", "256", ""),
    ("train.batch_size", "2", ""),
    ("train.weight_decay", "0.01", ""),
    ("train.clip_norm", "1", ""),
    ("train.log_interval", "100", ""),
    ("train.checkpoint_interval", "500", "0 disables intermediate checkpoints"),
    ("train.val_sequences", "8", ""),
    ("am.keep_ratio", "0.25", ""),
    ("am.max_queries", "256", ""),
    ("am.nnls_iters", "8", ""),
    ("am.ridge", "1e-4", "ridge coefficient relative to the squared spectral norm"),
    ("am.w_max", "", "normalizer weight cap; empty uses the prefix length"),
    ("compact.steps", "100", ""),
    ("compact.lr", "1e-2", ""),
    ("compact.weight_decay", "0", ""),
    ("compact.clip_norm", "1", ""),
    ("compact.record_steps", "0,1,2,5,10,20,50,100", ""),
    ("eval.model_tag", "model", "first CSV column"),
    ("eval.method", "am", "am, grad or first"),
    ("eval.prefix_len", "192", ""),
    ("eval.suffix_len", "64", ""),
    ("eval.examples", "64", "held-out suffix examples"),
    ("eval.keep_ratios", "0.05,0.1,0.2,0.4", ""),
    ("niah.digits", "4", ""),
    ("niah.prompt_len", "112", "must satisfy 2 * prompt_len + 31 <= model.max_seq_len for compression"),
    ("niah.distractor_prob", "0.35", ""),
    ("niah.examples_per_depth", "4", ""),
    ("niah.keep_ratios", "0.05,0.1,0.2,0.5", ""),
    ("theory.m_alb", "3", "alphabet size"),
    ("theory.n_max", "16", "maximum sequence length of the compressible construction"),
    ("theory.epsilon", "1e-9", ""),
    ("theory.trials", "200", "random prefix/suffix pairs"),
    ("theory.exhaustive_len", "4", "every pair with both parts up to this length"),
    ("theory.prop1_n_max", "8", "maximum sequence length of the averaging construction"),
    ("theory.prop1_budget", "6", "compact slots allowed in the averaging construction"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub corpus_path: Option<PathBuf>,
    pub corpus_kind: CorpusKind,
    pub corpus_bytes: usize,
    pub val_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub model_tag: String,
    pub method: Method,
    pub prefix_len: usize,
    pub suffix_len: usize,
    pub examples: usize,
    pub keep_ratios: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NiahConfig {
    pub digits: usize,
    pub prompt_len: usize,
    pub distractor_prob: f64,
    pub examples_per_depth: usize,
    pub keep_ratios: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TheoryConfig {
    pub m_alb: usize,
    pub n_max: usize,
    pub epsilon: f64,
    pub trials: usize,
    pub exhaustive_len: usize,
    pub prop1_n_max: usize,
    pub prop1_budget: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub init_checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub am: AmConfig,
    pub compact: CompactOptConfig,
    pub eval: EvalConfig,
    pub niah: NiahConfig,
    pub theory: TheoryConfig,
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::parse("").expect("defaults are valid")
    }
}

struct Raw<'a> {
    values: &'a BTreeMap<String, String>,
    lines: &'a BTreeMap<String, usize>,
}

impl Raw<'_> {
    fn err(&self, key: &str, msg: impl std::fmt::Display) -> Error {
        match self.lines.get(key) {
            Some(line) => Error::Config(format!("line {line}: `{key}`: {msg}")),
            None => Error::Config(format!("`{key}`: {msg}")),
        }
    }

    fn str(&self, key: &str) -> &str {
        &self.values[key]
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.str(key).parse().map_err(|e| self.err(key, format!("cannot parse `{}`: {e}", self.str(key))))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        let s = self.str(key);
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| p.trim().parse().map_err(|e| self.err(key, format!("cannot parse `{}`: {e}", p.trim())))).collect()
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        Some(self.str(key)).filter(|s| !s.is_empty()).map(PathBuf::from)
    }

    /// Attributes a validation error to the first key of `section` named in
    /// the message, else to `fallback`.
    fn check(&self, section: &str, fallback: &str, r: Result<()>) -> Result<()> {
        r.map_err(|e| match e {
            Error::Config(msg) => {
                let key = KEYS
                    .iter()
                    .map(|(k, _, _)| *k)
                    .filter(|k| k.starts_with(section))
                    .find(|k| msg.contains(&k[section.len()..]))
                    .unwrap_or(fallback);
                self.err(key, msg)
            }
            other => other,
        })
    }

    fn in_open_unit(&self, key: &str) -> Result<f64> {
        let v: f64 = self.get(key)?;
        if !(v > 0.0 && v < 1.0) {
            return Err(self.err(key, format!("{v} outside (0, 1)")));
        }
        Ok(v)
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values: BTreeMap<String, String> = KEYS.iter().map(|(k, d, _)| (k.to_string(), d.to_string())).collect();
        let mut lines = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) =
                body.split_once('=').ok_or_else(|| Error::Config(format!("line {line_no}: expected `key = value`, got `{body}`")))?;
            let key = key.trim();
            if !values.contains_key(key) {
                return Err(Error::Config(format!("line {line_no}: unknown key `{key}`")));
            }
            if let Some(prev) = lines.insert(key.to_string(), line_no) {
                return Err(Error::Config(format!("line {line_no}: `{key}` already set on line {prev}")));
            }
            values.insert(key.to_string(), value.trim().to_string());
        }
        Self::build(values, &lines)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    fn build(values: BTreeMap<String, String>, lines: &BTreeMap<String, usize>) -> Result<Self> {
        let r = Raw { values: &values, lines };
        let seed: u64 = r.get("seed")?;
        let model = ModelConfig {
            vocab_size: crate::eval::tokenizer::VOCAB_SIZE,
            d_model: r.get("model.d_model")?,
            n_layers: r.get("model.n_layers")?,
            n_heads: r.get("model.n_heads")?,
            d_ff: r.get("model.d_ff")?,
            max_seq_len: r.get("model.max_seq_len")?,
            router_layers: r.list("model.router_layers")?,
            seed: derive_seed(seed, "model"),
        };
        r.check("model.", "model.d_model", model.validate())?;
        let kind: PolicyKind = r.get("train.policy")?;
        let train = TrainConfig {
            lambda_mask: r.get("train.lambda_mask")?,
            lambda_anchor: r.get("train.lambda_anchor")?,
            lambda_budget: r.get("train.lambda_budget")?,
            policy: SparsificationPolicy { kind, rho: r.in_open_unit("train.rho")?, seed: derive_seed(seed, "policy") },
            d_r: r.get("train.d_r")?,
            tau: r.in_open_unit("train.tau")?,
            peak_lr: r.get("train.peak_lr")?,
            min_lr: r.get("train.min_lr")?,
            warmup_steps: r.get("train.warmup_steps")?,
            total_steps: r.get("train.total_steps")?,
            seq_len: r.get("train.seq_len")?,
            batch_size: r.get("train.batch_size")?,
            weight_decay: r.get("train.weight_decay")?,
            clip_norm: r.get("train.clip_norm")?,
            seed: derive_seed(seed, "train"),
            log_interval: r.get("train.log_interval")?,
            checkpoint_interval: r.get("train.checkpoint_interval")?,
            val_sequences: r.get("train.val_sequences")?,
        };
        r.check("train.", "train.seq_len", train.validate())?;
        if train.seq_len > model.max_seq_len {
            return Err(r.err("train.seq_len", format!("exceeds model.max_seq_len {}", model.max_seq_len)));
        }
        let w_max = match r.str("am.w_max") {
            "" => None,
            _ => Some(r.get("am.w_max")?),
        };
        let am = AmConfig {
            keep_ratio: r.get("am.keep_ratio")?,
            max_queries: r.get("am.max_queries")?,
            nnls_iters: r.get("am.nnls_iters")?,
            ridge: r.get("am.ridge")?,
            w_max,
        };
        r.check("am.", "am.keep_ratio", am.validate())?;
        let compact = CompactOptConfig {
            steps: r.get("compact.steps")?,
            lr: r.get("compact.lr")?,
            weight_decay: r.get("compact.weight_decay")?,
            clip_norm: r.get("compact.clip_norm")?,
            record_steps: r.list("compact.record_steps")?,
            record_metrics: false,
        };
        r.check("compact.", "compact.record_steps", compact.validate())?;
        let data = DataConfig {
            corpus_path: r.path("corpus_path"),
            corpus_kind: r.get("corpus_kind")?,
            corpus_bytes: r.get("corpus_bytes")?,
            val_fraction: r.get("val_fraction")?,
        };
        if !(data.val_fraction > 0.0 && data.val_fraction < 1.0) {
            return Err(r.err("val_fraction", "must lie in (0, 1)"));
        }
        let eval = EvalConfig {
            model_tag: r.str("eval.model_tag").to_string(),
            method: r.get("eval.method")?,
            prefix_len: r.get("eval.prefix_len")?,
            suffix_len: r.get("eval.suffix_len")?,
            examples: r.get("eval.examples")?,
            keep_ratios: r.list("eval.keep_ratios")?,
        };
        if eval.prefix_len == 0 || eval.suffix_len == 0 {
            return Err(r.err("eval.prefix_len", "prefix and suffix lengths must be positive"));
        }
        if eval.prefix_len + eval.suffix_len > model.max_seq_len {
            return Err(r.err("eval.prefix_len", format!("prefix plus suffix exceeds model.max_seq_len {}", model.max_seq_len)));
        }
        for &k in &eval.keep_ratios {
            r.check("eval.", "eval.keep_ratios", crate::compress::budget(k, 1).map(|_| ()))?;
        }
        let niah = NiahConfig {
            digits: r.get("niah.digits")?,
            prompt_len: r.get("niah.prompt_len")?,
            distractor_prob: r.get("niah.distractor_prob")?,
            examples_per_depth: r.get("niah.examples_per_depth")?,
            keep_ratios: r.list("niah.keep_ratios")?,
        };
        for &k in &niah.keep_ratios {
            r.check("niah.", "niah.keep_ratios", crate::compress::budget(k, 1).map(|_| ()))?;
        }
        r.check("niah.", "niah.prompt_len", niah.spec(0.5, 0).validate())?;
        if niah.prompt_len > model.max_seq_len {
            return Err(r.err("niah.prompt_len", format!("exceeds model.max_seq_len {}", model.max_seq_len)));
        }
        let theory = TheoryConfig {
            m_alb: r.get("theory.m_alb")?,
            n_max: r.get("theory.n_max")?,
            epsilon: r.get("theory.epsilon")?,
            trials: r.get("theory.trials")?,
            exhaustive_len: r.get("theory.exhaustive_len")?,
            prop1_n_max: r.get("theory.prop1_n_max")?,
            prop1_budget: r.get("theory.prop1_budget")?,
        };
        if theory.m_alb < 2 || theory.n_max < 2 || theory.prop1_n_max < 2 {
            return Err(r.err("theory.m_alb", "the constructions need an alphabet of at least 2 and lengths of at least 2"));
        }
        Ok(RunConfig {
            seed,
            workers: r.get("workers")?,
            init_checkpoint: r.path("init_checkpoint"),
            data,
            model,
            train,
            am,
            compact,
            eval,
            niah,
            theory,
            values,
        })
    }

    /// Raw string value of a key after defaults are applied.
    pub fn value(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// One `key = value` line per key, in [`KEYS`] order, defaults included.
    pub fn normalized(&self) -> String {
        KEYS.iter().map(|(k, _, _)| format!("{k} = {}\n", self.values[*k])).collect()
    }

    pub fn write_snapshot(&self, out_dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let path = out_dir.join(SNAPSHOT_FILE);
        std::fs::write(&path, self.normalized()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Applies `key = value` overrides as if appended to the file.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        if !self.values.contains_key(key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        let mut values = self.values.clone();
        values.insert(key.to_string(), value.to_string());
        Self::build(values, &BTreeMap::new())
    }

    /// Seeds used by the components: `model`, `policy`, `train`, `corpus`,
    /// `examples`, `niah`, `compress` and `theory`.
    pub fn component_seed(&self, name: &str) -> u64 {
        derive_seed(self.seed, name)
    }

    /// Corpus tokens: the file at `corpus_path`, or the synthetic corpus.
    pub fn corpus(&self) -> Result<Vec<usize>> {
        let bytes = match &self.data.corpus_path {
            Some(p) => {
                if !p.is_file() {
                    return Err(Error::Config(format!("`corpus_path`: no such file {}", p.display())));
                }
                std::fs::read(p).map_err(|e| Error::io(p, e))?
            }
            None => crate::eval::gen_corpus(self.data.corpus_kind, self.data.corpus_bytes, self.component_seed("corpus"))?,
        };
        Ok(crate::eval::tokenizer::encode(&bytes))
    }

    /// Training and held-out token streams.
    pub fn split(&self) -> Result<(Vec<usize>, Vec<usize>)> {
        crate::eval::split_train_val(&self.corpus()?, self.data.val_fraction)
    }

    /// Suffix examples drawn from the held-out stream.
    pub fn suffix_examples(&self) -> Result<Vec<crate::eval::SuffixExample>> {
        let (_, val) = self.split()?;
        crate::eval::make_suffix_examples(
            &val,
            self.eval.prefix_len,
            self.eval.suffix_len,
            self.eval.examples,
            self.component_seed("examples"),
        )
    }

    /// `examples_per_depth` prompts at every depth, depth-major.
    pub fn niah_examples(&self) -> Result<Vec<(f64, crate::eval::NiahExample)>> {
        let mut out = Vec::new();
        for &d in &crate::eval::NIAH_DEPTHS {
            for i in 0..self.niah.examples_per_depth {
                let seed = derive_seed(self.component_seed("niah"), &i.to_string());
                out.push((d, crate::eval::gen_niah(&self.niah.spec(d, seed))?));
            }
        }
        Ok(out)
    }

    pub fn suite_config(&self) -> crate::eval::SuiteConfig {
        crate::eval::SuiteConfig {
            model_tag: self.eval.model_tag.clone(),
            method: self.eval.method,
            keep_ratios: self.eval.keep_ratios.clone(),
            am: self.am.clone(),
            opt: self.compact.clone(),
        }
    }
}

impl NiahConfig {
    pub fn spec(&self, depth: f64, seed: u64) -> crate::eval::NiahSpec {
        crate::eval::NiahSpec { digits: self.digits, depth, distractor_prob: self.distractor_prob, prompt_len: self.prompt_len, seed }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_table_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c.train.peak_lr, 1e-4);
        assert_eq!(c.train.warmup_steps, 600);
        assert_eq!(c.train.lambda_budget, 0.1);
        assert_eq!(c.model.router_layers, vec![0, 2]);
        assert_eq!(c.compact.record_steps, vec![0, 1, 2, 5, 10, 20, 50, 100]);
        assert_eq!(c.eval.keep_ratios, vec![0.05, 0.1, 0.2, 0.4]);
        assert_eq!(c.am.w_max, None);
        assert!(c.data.corpus_path.is_none());
    }

    #[test]
    fn unknown_and_malformed_keys_are_line_numbered() {
        let e = RunConfig::parse("seed = 1\n\n# note\nmodel.width = 3\n").unwrap_err().to_string();
        assert!(e.contains("line 4") && e.contains("model.width"), "{e}");
        let e = RunConfig::parse("train.rho = 1.5").unwrap_err().to_string();
        assert!(e.contains("line 1") && e.contains("train.rho"), "{e}");
        let e = RunConfig::parse("seed 3").unwrap_err().to_string();
        assert!(e.contains("line 1"), "{e}");
        let e = RunConfig::parse("seed = 1\nseed = 2").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("line 1"), "{e}");
        assert!(matches!(RunConfig::parse("am.keep_ratio = 0"), Err(Error::Config(_))));
    }

    #[test]
    fn normalization_is_a_fixed_point() {
        let c = RunConfig::parse("  train.rho=0.25  # comment\nseed=7\n").unwrap();
        let text = c.normalized();
        assert_eq!(text.lines().count(), KEYS.len());
        assert!(text.contains("train.rho = 0.25\n") && text.starts_with("seed = 7\n"));
        assert_eq!(RunConfig::parse(&text).unwrap().normalized(), text);
        assert_eq!(RunConfig::parse(&text).unwrap(), RunConfig::parse(&text).unwrap());
    }

    #[test]
    fn missing_corpus_names_the_key() {
        let c = RunConfig::parse("corpus_path = /nonexistent/corpus.txt").unwrap();
        let e = c.corpus().unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        assert!(e.to_string().contains("corpus_path"));
    }

    #[test]
    fn seeds_derive_from_the_root() {
        let a = RunConfig::parse("seed = 1").unwrap();
        let b = RunConfig::parse("seed = 2").unwrap();
        assert_ne!(a.model.seed, b.model.seed);
        assert_eq!(a.model.seed, derive_seed(1, "model"));
        assert_eq!(a.with_override("train.total_steps", "10").unwrap().train.total_steps, 10);
        assert!(a.with_override("nope", "1").is_err());
    }

    #[test]
    fn every_key_has_a_default_that_parses() {
        let c = RunConfig::default();
        for (k, d, _) in KEYS {
            assert_eq!(c.value(k), Some(*d));
        }
        let niah = c.niah_examples().unwrap();
        assert_eq!(niah.len(), 5 * c.niah.examples_per_depth);
        assert!(niah.iter().all(|(_, ex)| ex.prompt.len() == c.niah.prompt_len));
    }
}
