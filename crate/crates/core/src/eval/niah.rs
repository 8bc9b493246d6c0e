//! Needle-in-a-haystack passkey retrieval.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::{digits, FILLER_SENTENCES};
use super::tokenizer::{decode_lossy, encode_str};
use crate::compress::{build_reconstruction_sequence, grad_compact_init, grad_compact_optimize_rows, CompactOptConfig, InitMode};
use crate::error::{Error, Result};
use crate::eval::SuffixExample;
use crate::model::{CompressedPrefixCache, Model};

pub const NIAH_DEPTHS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
pub const NEEDLE_PREFIX: &str = "Memory record: special_passkey=";

#[derive(Clone, Debug, PartialEq)]
pub struct NiahSpec {
    pub digits: usize,
    pub depth: f64,
    pub distractor_prob: f64,
    /// Prompt length in tokens (bytes).
    pub prompt_len: usize,
    pub seed: u64,
}

impl Default for NiahSpec {
    fn default() -> Self {
        NiahSpec { digits: 6, depth: 0.5, distractor_prob: 0.35, prompt_len: 512, seed: 0 }
    }
}

impl NiahSpec {
    pub fn validate(&self) -> Result<()> {
        if !NIAH_DEPTHS.contains(&self.depth) {
            return Err(Error::Config(format!("depth {} is not one of {NIAH_DEPTHS:?}", self.depth)));
        }
        if self.digits == 0 || !(0.0..1.0).contains(&self.distractor_prob) {
            return Err(Error::Config("passkey needs digits and a distractor probability in [0, 1)".into()));
        }
        if self.prompt_len < needle(&"0".repeat(self.digits)).len() {
            return Err(Error::Config(format!("prompt length {} cannot hold the needle", self.prompt_len)));
        }
        Ok(())
    }
}

pub fn needle(answer: &str) -> String {
    format!("{NEEDLE_PREFIX}{answer}.")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NiahExample {
    pub prompt: Vec<usize>,
    pub query: Vec<usize>,
    pub answer: String,
    /// Byte offset of the needle inside the prompt.
    pub needle_at: usize,
}

/// Haystack sentences depend only on the seed, so moving the depth moves
/// the needle and nothing else.
pub fn gen_niah(spec: &NiahSpec) -> Result<NiahExample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let answer = digits(&mut rng, spec.digits);
    let needle = needle(&answer);
    let room = spec.prompt_len - needle.len();
    let mut sentences: Vec<String> = Vec::new();
    let mut used = 0;
    loop {
        let s = if rng.random_bool(spec.distractor_prob) {
            let code = loop {
                let c = digits(&mut rng, spec.digits);
                if c != answer {
                    break c;
                }
            };
            format!("Ignore the misleading special passkey candidate {code}.")
        } else {
            FILLER_SENTENCES.choose(&mut rng).expect("non-empty").to_string()
        };
        if used + s.len() + 1 > room {
            break;
        }
        used += s.len() + 1;
        sentences.push(s);
    }
    let at = (spec.depth * sentences.len() as f64).round() as usize;
    let mut text = String::new();
    let mut needle_at = 0;
    for (i, s) in sentences.iter().enumerate() {
        if i == at {
            needle_at = text.len();
            text.push_str(&needle);
            text.push(' ');
        }
        text.push_str(s);
        text.push(' ');
    }
    if at == sentences.len() {
        needle_at = text.len();
        text.push_str(&needle);
        text.push(' ');
    }
    while text.len() < spec.prompt_len {
        text.push(' ');
    }
    text.truncate(spec.prompt_len);
    Ok(NiahExample { prompt: encode_str(&text), query: encode_str(NEEDLE_PREFIX), answer, needle_at })
}

/// Greedy decode of `answer.len()` tokens after `query`, with the prompt
/// supplied as a (possibly compressed) cache.
pub fn greedy_answer(model: &Model, cache: &CompressedPrefixCache, query: &[usize], len: usize) -> Result<String> {
    let mut ctx = query.to_vec();
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let logits = model.forward_with_compressed_prefix(cache, &ctx, cache.prefix_len)?;
        let row = logits.row(logits.rows() - 1);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        ctx.push(best);
        out.push(best);
    }
    Ok(decode_lossy(&out))
}

pub fn eval_niah(model: &Model, cache: &CompressedPrefixCache, ex: &NiahExample) -> Result<bool> {
    Ok(greedy_answer(model, cache, &ex.query, ex.answer.len())? == ex.answer)
}

/// Compact cache for a NIAH prompt: the dense cache at full budget,
/// otherwise random slots optimized on the reconstruction sequence.
pub fn niah_cache(model: &Model, ex: &NiahExample, keep_ratio: f64, opt: &CompactOptConfig, seed: u64) -> Result<CompressedPrefixCache> {
    let n = ex.prompt.len();
    let dense = model.forward_dense(&ex.prompt, None)?.cache;
    let m = crate::compress::budget(keep_ratio, n)?;
    if m == n {
        return Ok(CompressedPrefixCache::from_dense(&dense));
    }
    let recon = build_reconstruction_sequence(&ex.prompt, model.config.max_seq_len)?;
    if recon.text_len != n {
        return Err(Error::Precondition(format!(
            "a {n}-token prompt does not fit a reconstruction sequence of {} tokens",
            model.config.max_seq_len
        )));
    }
    let example = SuffixExample { prefix: ex.prompt.clone(), suffix: recon.tokens[n..].to_vec() };
    let teacher = super::metrics::dense_suffix_logits(model, &example)?;
    // Row r of the suffix predicts suffix token r + 1.
    let rows = recon.loss_start - n - 1..recon.tokens.len() - n - 1;
    let init = grad_compact_init(&dense, m, InitMode::RandomM { seed })?;
    Ok(grad_compact_optimize_rows(model, &init, &example, &teacher, rows, opt)?.0)
}
