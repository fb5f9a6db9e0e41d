use std::cmp::Ordering;
use std::collections::HashSet;

use super::{cosine, EmbeddingMatrix, TaskError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchHit {
    pub corpus_index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParaphrasePair {
    pub i: usize,
    pub j: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MiningOptions {
    pub query_chunk: usize,
    pub corpus_chunk: usize,
    pub top_k_per_query: usize,
    pub max_pairs: usize,
}

impl Default for MiningOptions {
    fn default() -> Self {
        MiningOptions { query_chunk: 5000, corpus_chunk: 100_000, top_k_per_query: 100, max_pairs: 500_000 }
    }
}

/// Higher score first, then lower index.
fn rank(a: (f64, usize), b: (f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Keeps the best `k` of `items` (under [`rank`]) in order.
fn keep_top(items: &mut Vec<(f64, usize)>, k: usize) {
    if items.len() > k {
        items.select_nth_unstable_by(k, |a, b| rank(*a, *b));
        items.truncate(k);
    }
    items.sort_by(|a, b| rank(*a, *b));
}

/// The `top_k` rows most similar to `query` by cosine.
pub fn semantic_search<T: Copy + Into<f64>>(
    query: &[T],
    corpus: &EmbeddingMatrix,
    top_k: usize,
) -> Result<Vec<SearchHit>, TaskError> {
    if top_k == 0 {
        return Err(TaskError::Invalid("top_k must be at least 1".into()));
    }
    let q: Vec<f64> = query.iter().map(|&v| v.into()).collect();
    let mut scored = Vec::with_capacity(corpus.n());
    for j in 0..corpus.n() {
        scored.push((cosine(&q, &corpus.row_f64(j))?, j));
    }
    keep_top(&mut scored, top_k);
    Ok(scored.into_iter().map(|(score, corpus_index)| SearchHit { corpus_index, score }).collect())
}

/// Most similar row pairs, computed tile by tile so the full `n x n`
/// score matrix is never held. Each row keeps its best
/// `top_k_per_query` partners; pairs are then canonicalized to `i < j`,
/// deduplicated, sorted by score (ties by `(i, j)`) and cut to
/// `max_pairs`.
pub fn paraphrase_mine(corpus: &EmbeddingMatrix, opts: &MiningOptions) -> Result<Vec<ParaphrasePair>, TaskError> {
    let n = corpus.n();
    if n < 2 {
        return Err(TaskError::TooFewRows { need: 2, got: n });
    }
    if opts.query_chunk == 0 || opts.corpus_chunk == 0 || opts.top_k_per_query == 0 {
        return Err(TaskError::Invalid("chunk sizes and top_k must be positive".into()));
    }
    let rows: Vec<Vec<f64>> = (0..n).map(|i| corpus.row_f64(i)).collect();
    let sq: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
    if sq.contains(&0.0) {
        return Err(TaskError::ZeroVector);
    }
    let mut best: Vec<Vec<(f64, usize)>> = vec![Vec::new(); n];
    for qs in (0..n).step_by(opts.query_chunk) {
        let qe = (qs + opts.query_chunk).min(n);
        for cs in (0..n).step_by(opts.corpus_chunk) {
            let ce = (cs + opts.corpus_chunk).min(n);
            for i in qs..qe {
                let list = &mut best[i];
                for j in cs..ce {
                    if j != i {
                        list.push((pair_score(&rows[i], &rows[j], sq[i], sq[j]), j));
                    }
                }
                keep_top(list, opts.top_k_per_query);
            }
        }
    }
    let mut seen = HashSet::new();
    let mut pairs = Vec::new();
    for (i, list) in best.iter().enumerate() {
        for &(score, j) in list {
            let (a, b) = if i < j { (i, j) } else { (j, i) };
            if seen.insert((a, b)) {
                pairs.push(ParaphrasePair { i: a, j: b, score });
            }
        }
    }
    pairs.sort_by(|x, y| y.score.total_cmp(&x.score).then((x.i, x.j).cmp(&(y.i, y.j))));
    pairs.truncate(opts.max_pairs);
    Ok(pairs)
}

/// [`cosine`] with precomputed squared norms; bit-identical to it.
fn pair_score(a: &[f64], b: &[f64], sa: f64, sb: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y);
    (dot / (sa * sb).sqrt()).clamp(-1.0, 1.0)
}
