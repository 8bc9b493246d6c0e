//! Binary array container shared by model checkpoints, training state and
//! compact caches.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"KVCAT1"
//! u32 header_len, header_len bytes of UTF-8 `key=value` lines
//! repeated until EOF:
//!   u32 name_len, name bytes
//!   u32 rank, rank x u64 dims
//!   product(dims) x f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelConfig, TransformerWeights};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"KVCAT1";

/// A named array. Unlike [`Tensor`], dimensions may be zero (an empty
/// compact cache has zero slots).
#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Self {
        NamedArray { name: name.into(), dims: t.shape().to_vec(), data: t.data().to_vec() }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.dims.clone(), self.data.clone()).map_err(|e| Error::Format(format!("array `{}`: {e}", self.name)))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ArrayFile {
    pub header: Vec<(String, String)>,
    pub arrays: Vec<NamedArray>,
}

impl ArrayFile {
    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let header: String = self.header.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.extend_from_slice(&(a.dims.len() as u32).to_le_bytes());
            for &d in &a.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        Self::read_from(&mut r).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        })
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let io = |e| Error::io("<stream>", e);
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&magic))));
        }
        let header_len = read_u32(r)? as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes).map_err(io)?;
        let header_text = String::from_utf8(header_bytes).map_err(|_| Error::Format("header is not UTF-8".into()))?;
        let mut header = Vec::new();
        for line in header_text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format(format!("header line without `=`: {line:?}")))?;
            header.push((k.to_string(), v.to_string()));
        }
        let mut arrays = Vec::new();
        loop {
            let mut len_bytes = [0u8; 4];
            // A clean EOF is only allowed between arrays.
            match r.read(&mut len_bytes[..1]).map_err(io)? {
                0 => break,
                _ => r.read_exact(&mut len_bytes[1..]).map_err(io)?,
            }
            let name_len = u32::from_le_bytes(len_bytes) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            let rank = read_u32(r)? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("array `{name}` has implausible rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(io)?;
                dims.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = dims.iter().product();
            let mut raw = vec![0u8; numel * 8];
            r.read_exact(&mut raw).map_err(io)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            arrays.push(NamedArray { name, dims, data });
        }
        Ok(ArrayFile { header, arrays })
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::io("<stream>", e))?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn model_to_file(model: &Model) -> ArrayFile {
    let mut header = vec![("kind".to_string(), "model".to_string())];
    header.extend(model.config.to_pairs());
    let arrays = model.weights.named().into_iter().map(|(n, t)| NamedArray::from_tensor(n, t)).collect();
    ArrayFile { header, arrays }
}

pub(crate) fn model_from_file(file: &ArrayFile) -> Result<Model> {
    let config = ModelConfig::from_pairs(&file.header)?;
    let weights = TransformerWeights::from_named(&config, |name| file.array(name).and_then(|a| a.to_tensor().ok()))?;
    Ok(Model { config, weights })
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    model_to_file(model).write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    model_from_file(&ArrayFile::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        Model::init(ModelConfig {
            vocab_size: 7,
            d_model: 4,
            n_layers: 2,
            n_heads: 2,
            d_ff: 8,
            max_seq_len: 6,
            router_layers: vec![0, 1],
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn save_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.kvcat");
        let m = tiny();
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.weights.checksum(), m.weights.checksum());
        assert_eq!(back.config, m.config);
        assert_eq!(back, m);
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let mut bytes = model_to_file(&tiny()).to_bytes();
        bytes[2] ^= 0xff;
        let err = ArrayFile::read_from(&mut bytes.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn truncated_file_is_an_io_error() {
        let bytes = model_to_file(&tiny()).to_bytes();
        let cut = &bytes[..bytes.len() - 5];
        let err = ArrayFile::read_from(&mut &cut[..]).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }

    #[test]
    fn zero_sized_arrays_round_trip() {
        let f = ArrayFile {
            header: vec![("a".into(), "b".into())],
            arrays: vec![NamedArray { name: "empty".into(), dims: vec![0, 4], data: vec![] }],
        };
        assert_eq!(ArrayFile::read_from(&mut f.to_bytes().as_slice()).unwrap(), f);
    }
}
