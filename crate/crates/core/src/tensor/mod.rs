//! Dense f64 tensors, a reverse-mode tape, and the AdamW optimizer.
//!
//! Every op works on rank-2 row-major data. Rank-1 tensors of shape `[n]`
//! are viewed as `1 x n` rows and scalars as `1 x 1`.

mod optim;
mod tape;

use thiserror::Error;

pub use optim::{optimizer_step, AdamWConfig, OptimizerState, Scheduler};
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("invalid tensor: {0}")]
    Invalid(String),
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("no supervised positions")]
    NoSupervisedPositions,
    #[error("target id {id} at position {position} is outside vocabulary of {vocab}")]
    TargetOutOfRange { position: usize, id: usize, vocab: usize },
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("zero-norm row {0} cannot be normalized")]
    ZeroNorm(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::Invalid(format!("shape {shape:?} has a zero dimension")));
        }
        if shape.len() > 2 {
            return Err(TensorError::Invalid(format!("rank {} tensors are unsupported", shape.len())));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Invalid(format!("shape {shape:?} needs {expected} values, got {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n]).expect("zeros: valid shape")
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n]).expect("filled: valid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1, 1], data: vec![value] }
    }

    /// A `1 x n` row.
    pub fn row(values: Vec<f64>) -> Self {
        Tensor { shape: vec![1, values.len()], data: values }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(TensorError::Invalid("ragged rows".into()));
        }
        Self::matrix(r, c, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// (rows, cols) of the rank-2 view.
    pub fn dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("rank checked at construction"),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims().0
    }

    pub fn cols(&self) -> usize {
        self.dims().1
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.dims();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor { shape: vec![c, r], data: out }
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// Plain `a (m x k) * b (k x n)` product.
pub fn matmul_plain(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    if k != k2 {
        return Err(TensorError::Shape { op: "matmul", left: a.shape().to_vec(), right: b.shape().to_vec() });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructor_validates_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2, 2], vec![0.0; 8]).is_err());
    }

    #[test]
    fn rank_one_views_as_row() {
        let t = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        assert_eq!(t.dims(), (1, 4));
    }

    #[test]
    fn transpose_round_trip() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(t.transpose().transpose(), t);
        assert_eq!(t.transpose().get(2, 1), 6.0);
    }
}
