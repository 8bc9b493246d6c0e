//! Synthetic data, tokenization and the evaluation protocols.

pub mod data;
pub mod metrics;
pub mod niah;
pub mod suite;
pub mod tokenizer;

pub use data::{gen_corpus, make_suffix_examples, split_train_val, CorpusKind, SuffixExample, FILLER_SENTENCES};
pub use metrics::{compare_logits, dense_suffix_logits, eval_against, eval_suffix_metrics, SuffixMetrics};
pub use niah::{eval_niah, gen_niah, greedy_answer, needle, niah_cache, NiahExample, NiahSpec, NEEDLE_PREFIX, NIAH_DEPTHS};
pub use suite::{
    compress_example, run_niah_suite, run_suite, write_csv, Method, NiahOutcome, NiahRow, SuffixRow, SuiteConfig, SuiteOutcome,
};
