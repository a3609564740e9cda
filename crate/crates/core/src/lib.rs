//! Retrieval-augmented few-shot table-to-text generation.
//!
//! The pipeline retrieves candidate sentences for a table with BM25, reranks
//! them with a trainable prototype selector, and conditions a small
//! autoregressive generator on the table plus the selected prototypes.
//!
//! | module | role |
//! |---|---|
//! | [`tabledata`] | tables, corpora, linearization, vocabulary |
//! | [`retrieval`] | tokenizer, inverted index, BM25, leakage filter |
//! | [`selector`] | pairwise scorer, margin-ranking training, top-n selection |
//! | [`generator`] | causal decoder, LM and content-aware losses, greedy decoding |
//! | [`evaluation`] | BLEU-4, ROUGE-4 F, precision@k, sign test |
//! | [`pipeline`] | synthetic benchmark, end-to-end runs, ablation and sweeps |

pub mod error;
pub mod evaluation;
pub mod generator;
pub mod jsonl;
pub mod optim;
pub mod pipeline;
pub mod retrieval;
pub mod selector;
pub mod tabledata;

pub use error::{Error, Result};
pub use retrieval::tokenize;
