use std::cmp::Ordering;
use std::collections::HashMap;

use super::{cosine_similarity, EmbeddingIndex, FunctionEmbedding, SimilarityError};

/// Probability that a random positive outscores a random negative, ties
/// counted as one half. Computed from average ranks.
pub fn roc_auc(scores: &[(f64, bool)]) -> Result<f64, SimilarityError> {
    let pos = scores.iter().filter(|s| s.1).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(SimilarityError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].0.partial_cmp(&scores[b].0).unwrap_or(Ordering::Equal));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]].0 == scores[order[i]].0 {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| scores[k].1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// False and true positive rates at every distinct threshold, from (0,0)
/// to (1,1).
pub fn roc_curve(scores: &[(f64, bool)]) -> Vec<(f64, f64)> {
    let pos = scores.iter().filter(|s| s.1).count().max(1) as f64;
    let neg = scores.iter().filter(|s| !s.1).count().max(1) as f64;
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    let mut out = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        out.push((fp / neg, tp / pos));
    }
    out
}

/// Rank (0-based) of each query's ground truth among the targets.
fn truth_ranks(
    queries: &[FunctionEmbedding],
    targets: &EmbeddingIndex,
    truth: &HashMap<String, String>,
) -> Result<Vec<usize>, SimilarityError> {
    queries
        .iter()
        .map(|q| {
            let want = truth
                .get(&q.fn_id)
                .ok_or_else(|| SimilarityError::MissingTruth(q.fn_id.clone()))?;
            let ranked = targets.search(&q.vector, targets.len())?;
            ranked
                .iter()
                .position(|(id, _)| id == want)
                .map_or(Ok(usize::MAX), Ok)
        })
        .collect()
}

/// Fraction of queries whose single best match is the ground truth.
pub fn precision_at_1(
    queries: &[FunctionEmbedding],
    targets: &EmbeddingIndex,
    truth: &HashMap<String, String>,
) -> Result<f64, SimilarityError> {
    Ok(1.0 - topk_error(queries, targets, truth, 1)?)
}

/// Fraction of queries whose ground truth is missing from the top `k`.
pub fn topk_error(
    queries: &[FunctionEmbedding],
    targets: &EmbeddingIndex,
    truth: &HashMap<String, String>,
    k: usize,
) -> Result<f64, SimilarityError> {
    if queries.is_empty() {
        return Err(SimilarityError::EmptyIndex);
    }
    let ranks = truth_ranks(queries, targets, truth)?;
    Ok(ranks.iter().filter(|&&r| r >= k).count() as f64 / ranks.len() as f64)
}

/// All top-k errors at once, sharing one ranking per query.
pub fn topk_errors(
    queries: &[FunctionEmbedding],
    targets: &EmbeddingIndex,
    truth: &HashMap<String, String>,
    ks: &[usize],
) -> Result<Vec<f64>, SimilarityError> {
    if queries.is_empty() {
        return Err(SimilarityError::EmptyIndex);
    }
    let ranks = truth_ranks(queries, targets, truth)?;
    Ok(ks
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r >= k).count() as f64 / ranks.len() as f64)
        .collect())
}

pub const KL_EPSILON: f64 = 1e-6;

fn byte_histogram(bytes: &[u8], eps: f64) -> [f64; 256] {
    let mut h = [0.0; 256];
    for &b in bytes {
        h[b as usize] += 1.0;
    }
    for x in h.iter_mut() {
        if *x == 0.0 {
            *x = eps;
        }
    }
    let z: f64 = h.iter().sum();
    h.map(|x| x / z)
}

/// KL(P || Q) of probability vectors.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

/// KL divergence between the 256-bin byte histograms of two corpora;
/// empty bins get `eps` before normalizing.
pub fn byte_kl_divergence(a: &[u8], b: &[u8], eps: f64) -> f64 {
    kl_divergence(&byte_histogram(a, eps), &byte_histogram(b, eps))
}

/// Sanity oracle for ranking: every cosine recomputed and sorted.
pub fn brute_force_ranking(entries: &[FunctionEmbedding], query: &[f64]) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = entries
        .iter()
        .map(|e| (e.fn_id.clone(), cosine_similarity(&e.vector, query).unwrap_or(f64::NAN)))
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    all
}
