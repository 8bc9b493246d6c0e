//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by three specials.

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;
pub const VOCAB_SIZE: usize = 259;

pub fn encode(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

pub fn encode_str(s: &str) -> Vec<usize> {
    encode(s.as_bytes())
}

/// Inverse of [`encode`]; special tokens are dropped.
pub fn decode(ids: &[usize]) -> Vec<u8> {
    ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect()
}

pub fn decode_lossy(ids: &[usize]) -> String {
    String::from_utf8_lossy(&decode(ids)).into_owned()
}
