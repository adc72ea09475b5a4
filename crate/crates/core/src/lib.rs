//! Execution-aware function similarity over a toy two-dialect IR.
//!
//! Functions are micro-executed to collect traces, a small hierarchical
//! Transformer is pretrained on those traces with a masked-token objective,
//! and a pooling head is finetuned to produce function embeddings whose
//! cosine similarity tracks semantic equivalence.

pub mod corpus;
pub mod encoding;
pub mod ir;
pub mod microtrace;
pub mod neural;
pub mod pipeline;
pub mod similarity;

