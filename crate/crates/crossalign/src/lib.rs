//! Cross-modal alignment and retrieval over multi-scale embedding corpora.
//!
//! The crate matches gallery images against text queries when both sides
//! arrive as precomputed embeddings at several scales: one global vector
//! plus four body-region vectors per image, one global vector plus a
//! handful of noun-phrase vectors per caption. Scoring runs a
//! bidirectional cross-attention similarity between the two sets; training
//! combines global projection-matching losses with a KL matching loss over
//! the attention scores, all differentiated on a scalar reverse-mode tape.
//!
//! Modules:
//! - [`numerics`]: dense-vector math and the differentiation tape.
//! - [`corpus`]: the embedding-corpus data model, file format, and a
//!   synthetic generator for benchmarks.
//! - [`partition`]: six horizontal slices → four overlapping regions.
//! - [`alignment`]: the asymmetric cross-attention pair similarity.
//! - [`losses`]: CMPM/CMPC, the cross-scale KL matching loss, the weighted
//!   total, gradient checking, and a toy trainer.
//! - [`retrieval`]: corpus-level scoring, top-k evaluation, re-ranking.
//! - [`cli`]: the command-line surface used by the `crossalign` binary.
//!
//! See the crate `examples/` directory for runnable walkthroughs of each
//! capability.

pub mod alignment;
pub mod cli;
pub mod corpus;
pub mod losses;
pub mod numerics;
pub mod partition;
pub mod retrieval;
