//! Compression-aware training for a small decoder-only transformer, plus
//! post-hoc KV-cache compressors and the evaluation protocols used to
//! compare them.

pub mod autodiff;
pub mod cli;
pub mod compress;
pub mod config;
pub mod error;
pub mod eval;
pub mod model;
pub mod router;
pub mod seed;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
