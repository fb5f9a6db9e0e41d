//! Downstream tasks over sentence embeddings: similarity, search,
//! paraphrase mining, clustering and a 2-D projection.

mod cluster;
mod search;

use std::collections::HashMap;

use thiserror::Error;

pub use cluster::{kmeans_cluster, project_2d, ClusterAssignment};
pub use search::{paraphrase_mine, semantic_search, MiningOptions, ParaphrasePair, SearchHit};

#[derive(Debug, Error, PartialEq)]
pub enum TaskError {
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("need at least {need} rows, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error("data has no variance to project")]
    RankZero,
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Row-major f32 embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    n: usize,
    d: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl EmbeddingMatrix {
    pub fn new(n: usize, d: usize, data: Vec<f32>) -> Result<Self, TaskError> {
        if data.len() != n * d {
            return Err(TaskError::Dimension(format!("{n} x {d} matrix needs {} values, got {}", n * d, data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TaskError::Invalid("embedding contains a non-finite value".into()));
        }
        Ok(EmbeddingMatrix { n, d, data, normalized: false })
    }

    /// Rounds f64 rows to f32. All rows must share one length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, TaskError> {
        let d = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            let r = r.as_ref();
            if r.len() != d {
                return Err(TaskError::Dimension(format!("row of {} values in a {d}-wide matrix", r.len())));
            }
            data.extend(r.iter().map(|&v| v as f32));
        }
        Self::new(rows.len(), d, data)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    /// Copy with every row scaled to unit L2 norm.
    pub fn normalized(&self) -> Result<Self, TaskError> {
        let mut data = Vec::with_capacity(self.data.len());
        for i in 0..self.n {
            let r = self.row_f64(i);
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(TaskError::ZeroVector);
            }
            data.extend(r.iter().map(|v| (v / norm) as f32));
        }
        Ok(EmbeddingMatrix { n: self.n, d: self.d, data, normalized: true })
    }
}

/// `u·v / sqrt(|u|² |v|²)` accumulated in f64 and clamped to `[-1, 1]`.
pub fn cosine<T: Copy + Into<f64>>(u: &[T], v: &[T]) -> Result<f64, TaskError> {
    if u.len() != v.len() {
        return Err(TaskError::Dimension(format!("{} vs {} values", u.len(), v.len())));
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b): (f64, f64) = (a.into(), b.into());
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(TaskError::ZeroVector);
    }
    Ok((dot / (nu * nv).sqrt()).clamp(-1.0, 1.0))
}

/// Distinct sentences with their occurrence counts, in first-occurrence
/// order.
pub fn dedup_counts<S: AsRef<str>>(sentences: &[S]) -> Vec<(String, usize)> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut out: Vec<(String, usize)> = Vec::new();
    for s in sentences {
        let s = s.as_ref();
        match index.get(s) {
            Some(&i) => out[i].1 += 1,
            None => {
                index.insert(s, out.len());
                out.push((s.to_string(), 1));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine(&[0.3, -2.0, 7.5], &[0.3, -2.0, 7.5]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(TaskError::ZeroVector));
        assert!(cosine(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn dedup_count_examples() {
        assert_eq!(dedup_counts(&["A", "A", "B"]), vec![("A".to_string(), 2), ("B".to_string(), 1)]);
        assert!(dedup_counts::<&str>(&[]).is_empty());
    }

    #[test]
    fn normalized_rows_have_unit_norm() {
        let m = EmbeddingMatrix::from_rows(&[vec![3.0, 4.0], vec![-1.0, 0.0]]).unwrap().normalized().unwrap();
        assert!(m.is_normalized());
        for i in 0..2 {
            let n: f64 = m.row_f64(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        assert!(EmbeddingMatrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(EmbeddingMatrix::new(1, 1, vec![f32::NAN]).is_err());
    }
}
