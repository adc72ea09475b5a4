//! Function embeddings from static code, the pair finetuning objective,
//! brute-force search and evaluation metrics.

mod finetune;
mod metrics;
mod report;

use std::cmp::Ordering;
use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{split_subsequences, tokenize_trace, EncodeError, EncodedInput, Vocab};
use crate::ir::{Dialect, IrFunction};
use crate::microtrace::dummy_trace;
use crate::neural::{Model, Tape};

pub use finetune::{finetune, FinetuneConfig, FinetuneStats, PairRef, DEFAULT_MARGIN};
pub use metrics::{
    brute_force_ranking, byte_kl_divergence, kl_divergence, precision_at_1, roc_auc, roc_curve, topk_error,
    topk_errors, KL_EPSILON,
};
pub use report::{roc_ascii, roc_svg, EvalReport};

#[derive(Debug, Error, PartialEq)]
pub enum SimilarityError {
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("index is empty")]
    EmptyIndex,
    #[error("duplicate id {0} in index")]
    DuplicateId(String),
    #[error("scores contain only one class")]
    SingleClass,
    #[error("no ground truth for query {0}")]
    MissingTruth(String),
    #[error("vectors have different lengths ({0} vs {1})")]
    Dimension(usize, usize),
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, SimilarityError> {
    if a.len() != b.len() {
        return Err(SimilarityError::Dimension(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(SimilarityError::ZeroVector);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `1 - cos` for similar pairs, `max(0, cos - margin)` for dissimilar ones.
pub fn finetune_loss(a: &[f64], b: &[f64], y: i8, margin: f64) -> Result<f64, SimilarityError> {
    let c = cosine_similarity(a, b)?;
    Ok(if y > 0 { 1.0 - c } else { (c - margin).max(0.0) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionEmbedding {
    pub fn_id: String,
    pub dialect: Dialect,
    pub vector: Vec<f64>,
}

/// Exact cosine search over every stored embedding.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingIndex {
    entries: Vec<FunctionEmbedding>,
}

impl EmbeddingIndex {
    pub fn new(entries: Vec<FunctionEmbedding>) -> Result<EmbeddingIndex, SimilarityError> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.fn_id.as_str()) {
                return Err(SimilarityError::DuplicateId(e.fn_id.clone()));
            }
        }
        Ok(EmbeddingIndex { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[FunctionEmbedding] {
        &self.entries
    }

    /// The `k` most similar entries by descending cosine, ties broken by id.
    pub fn search(&self, query: &[f64], k: usize) -> Result<Vec<(String, f64)>, SimilarityError> {
        if self.entries.is_empty() {
            return Err(SimilarityError::EmptyIndex);
        }
        let mut scored = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            scored.push((e.fn_id.as_str(), cosine_similarity(&e.vector, query)?));
        }
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(b.0)));
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(id, s)| (id.to_string(), s))
            .collect())
    }
}

/// Static-code model input for `f`: the dummy trace, split into chunks.
pub fn static_inputs(f: &IrFunction, vocab: &Vocab, max_len: usize) -> Result<Vec<EncodedInput>, EncodeError> {
    split_subsequences(&tokenize_trace(&dummy_trace(f), vocab)?, max_len)
}

/// Embeds already-encoded functions in batches.
pub fn embed_inputs(model: &Model, inputs: &[Vec<EncodedInput>], batch: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch.max(1)) {
        let mut tape = Tape::new();
        let v = model.function_embeddings(&mut tape, chunk);
        out.extend(tape.value(v).rows().into_iter().map(|r| r.to_vec()));
    }
    out
}

pub fn function_embedding(model: &Model, vocab: &Vocab, f: &IrFunction) -> Result<FunctionEmbedding, EncodeError> {
    let inputs = static_inputs(f, vocab, model.config.max_len)?;
    Ok(FunctionEmbedding {
        fn_id: f.id.clone(),
        dialect: f.dialect,
        vector: embed_inputs(model, &[inputs], 1).remove(0),
    })
}

pub fn embed_functions(model: &Model, vocab: &Vocab, fns: &[IrFunction]) -> Result<Vec<FunctionEmbedding>, EncodeError> {
    let inputs = fns
        .iter()
        .map(|f| static_inputs(f, vocab, model.config.max_len))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(fns
        .iter()
        .zip(embed_inputs(model, &inputs, 32))
        .map(|(f, vector)| FunctionEmbedding {
            fn_id: f.id.clone(),
            dialect: f.dialect,
            vector,
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct StoreRecord {
    fn_id: String,
    dialect: Dialect,
    vector: Vec<f32>,
}

/// JSON lines `{fn_id, dialect, vector}`; vectors are stored as f32.
pub fn write_embeddings<W: Write>(mut w: W, embs: &[FunctionEmbedding]) -> std::io::Result<()> {
    for e in embs {
        let rec = StoreRecord {
            fn_id: e.fn_id.clone(),
            dialect: e.dialect,
            vector: e.vector.iter().map(|&x| x as f32).collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_embeddings<R: BufRead>(r: R) -> std::io::Result<Vec<FunctionEmbedding>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StoreRecord = serde_json::from_str(&line)?;
        out.push(FunctionEmbedding {
            fn_id: rec.fn_id,
            dialect: rec.dialect,
            vector: rec.vector.into_iter().map(f64::from).collect(),
        });
    }
    Ok(out)
}
