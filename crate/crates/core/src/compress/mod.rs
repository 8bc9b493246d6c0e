//! Post-hoc KV-cache compression: attention matching, gradient-based
//! compaction, and the keep-first-m baseline.

mod am;
mod gradopt;
mod recon;

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ArrayFile, CompactHead, CompressedPrefixCache, KvCache, NamedArray};

pub use am::{am_fit_bias, am_fit_values, am_select_keys, attention_matching_compress, nnls_box, AmConfig, AmReport, NnlsFit, W_FLOOR};
pub use gradopt::{
    grad_compact_optimize, grad_compact_optimize_rows, CompactOptConfig, CompactionRecord, CompactionTrace, DEFAULT_RECORD_STEPS,
};
pub use recon::{build_reconstruction_sequence, ReconSequence, RECON_INSTRUCTION};

/// Slots kept for a keep ratio over an `n`-slot prefix.
pub fn budget(keep_ratio: f64, n: usize) -> Result<usize> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::Config(format!("keep ratio {keep_ratio} outside (0, 1]")));
    }
    Ok(crate::router::keep_count(keep_ratio, n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    FirstM,
    RandomM { seed: u64 },
}

/// Copies `m` dense slots into a compact cache without bias.
pub fn grad_compact_init(cache: &KvCache, m: usize, mode: InitMode) -> Result<CompressedPrefixCache> {
    if m > cache.len {
        return Err(Error::Budget { requested: m, available: cache.len });
    }
    let idx: Vec<usize> = match mode {
        InitMode::FirstM => (0..m).collect(),
        InitMode::RandomM { seed } => {
            let mut v = sample(&mut ChaCha8Rng::seed_from_u64(seed), cache.len, m).into_vec();
            v.sort_unstable();
            v
        }
    };
    Ok(gather_slots(cache, &idx))
}

/// Same-budget naive baseline: the first `m` slots, unchanged.
pub fn keep_first_m(cache: &KvCache, m: usize) -> Result<CompressedPrefixCache> {
    grad_compact_init(cache, m, InitMode::FirstM)
}

pub(crate) fn gather_slots(cache: &KvCache, idx: &[usize]) -> CompressedPrefixCache {
    let d_head = cache.keys[0][0].cols();
    let pick = |t: &crate::autodiff::Tensor| -> Vec<f64> { idx.iter().flat_map(|&j| t.row(j).to_vec()).collect() };
    let heads = cache
        .keys
        .iter()
        .zip(&cache.values)
        .map(|(ks, vs)| ks.iter().zip(vs).map(|(k, v)| CompactHead { keys: pick(k), values: pick(v), bias: None }).collect())
        .collect();
    CompressedPrefixCache { prefix_len: cache.len, slots: idx.len(), d_head, heads }
}

pub fn compact_to_file(c: &CompressedPrefixCache) -> ArrayFile {
    let n_heads = c.heads.first().map_or(0, Vec::len);
    let mut file = ArrayFile {
        header: vec![
            ("kind".into(), "compact_cache".into()),
            ("prefix_len".into(), c.prefix_len.to_string()),
            ("slots".into(), c.slots.to_string()),
            ("d_head".into(), c.d_head.to_string()),
            ("n_layers".into(), c.heads.len().to_string()),
            ("n_heads".into(), n_heads.to_string()),
        ],
        arrays: vec![],
    };
    let dims = vec![c.slots, c.d_head];
    for (l, heads) in c.heads.iter().enumerate() {
        for (h, head) in heads.iter().enumerate() {
            let name = |s: &str| format!("layer{l}.head{h}.{s}");
            file.arrays.push(NamedArray { name: name("K"), dims: dims.clone(), data: head.keys.clone() });
            file.arrays.push(NamedArray { name: name("V"), dims: dims.clone(), data: head.values.clone() });
            if let Some(b) = &head.bias {
                file.arrays.push(NamedArray { name: name("beta"), dims: vec![c.slots], data: b.clone() });
            }
        }
    }
    file
}

pub fn compact_from_file(file: &ArrayFile) -> Result<CompressedPrefixCache> {
    if file.header_value("kind") != Some("compact_cache") {
        return Err(Error::Format("not a compact cache file".into()));
    }
    let num = |key: &str| -> Result<usize> {
        file.header_value(key).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Format(format!("compact cache lacks `{key}`")))
    };
    let (slots, d_head) = (num("slots")?, num("d_head")?);
    let mut heads = Vec::new();
    for l in 0..num("n_layers")? {
        let mut layer = Vec::new();
        for h in 0..num("n_heads")? {
            let get = |s: &str, len: usize| -> Result<Vec<f64>> {
                let name = format!("layer{l}.head{h}.{s}");
                let a = file.array(&name).ok_or_else(|| Error::Format(format!("missing array `{name}`")))?;
                if a.data.len() != len {
                    return Err(Error::Format(format!("array `{name}` holds {} values, expected {len}", a.data.len())));
                }
                Ok(a.data.clone())
            };
            let bias = match file.array(&format!("layer{l}.head{h}.beta")) {
                Some(_) => Some(get("beta", slots)?),
                None => None,
            };
            layer.push(CompactHead { keys: get("K", slots * d_head)?, values: get("V", slots * d_head)?, bias });
        }
        heads.push(layer);
    }
    Ok(CompressedPrefixCache { prefix_len: num("prefix_len")?, slots, d_head, heads })
}

pub fn save_compact(c: &CompressedPrefixCache, path: &Path) -> Result<()> {
    compact_to_file(c).write(path)
}

pub fn load_compact(path: &Path) -> Result<CompressedPrefixCache> {
    compact_from_file(&ArrayFile::read(path)?)
}

#[cfg(test)]
mod tests;
