use candle_core::{DType, Tensor};

use crate::error::{Error, Result};

/// Row-major `rows x dim` matrix of embedding vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::Shape(format!(
                "{} values cannot form a {rows}x{dim} embedding matrix",
                data.len()
            )));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("ragged embedding rows".into()));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (rows, dim) = t.dims2()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(rows, dim, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            dim: self.dim,
            data,
        }
    }

    /// Stacks matrices with equal width.
    pub fn concat(parts: &[EmbeddingMatrix]) -> Result<Self> {
        let dim = parts.first().map_or(0, |p| p.dim);
        if parts.iter().any(|p| p.dim != dim) {
            return Err(Error::Shape("cannot concatenate embeddings of different widths".into()));
        }
        let data: Vec<f32> = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Ok(Self {
            rows: data.len().checked_div(dim).unwrap_or(0),
            dim,
            data,
        })
    }
}

/// Euclidean distance accumulated in `f64`.
pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = f64::from(*x) - f64::from(*y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}
