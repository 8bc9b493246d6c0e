//! The toy decoder-only transformer, its KV caches and checkpoints.

mod checkpoint;
mod config;
mod forward;
mod weights;

pub use checkpoint::{load_checkpoint, save_checkpoint, ArrayFile, NamedArray, MAGIC};
pub use config::ModelConfig;
pub use forward::{AttnTrace, CompactHead, CompressedPrefixCache, DenseOutput, KvCache, Model};
pub use weights::{init_weights, LayerWeights, TransformerWeights};

pub(crate) use checkpoint::{model_from_file, model_to_file};
#[cfg(test)]
pub(crate) use forward::RMS_EPS;
pub(crate) use forward::{bind, compact_leaves, forward_graph, masked_visibility, BoundWeights, LayerAttention};
