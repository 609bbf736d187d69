//! JSON helpers for matrices stored row-major with explicit dimensions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("matrix `{name}` has {len} entries, expected {rows}x{cols}")]
    BadMatrix {
        name: String,
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense matrix as `{rows, cols, data}` with `data` in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixJson {
    pub fn from_matrix<T: Real>(m: &DMatrix<T>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)].to_f64_lossy());
            }
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    pub fn from_vector<T: Real>(v: &DVector<T>) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.iter().map(|x| x.to_f64_lossy()).collect(),
        }
    }

    pub fn to_matrix<T: Real>(&self, name: &str) -> Result<DMatrix<T>, IoError> {
        if self.data.len() != self.rows * self.cols {
            return Err(IoError::BadMatrix {
                name: name.to_string(),
                rows: self.rows,
                cols: self.cols,
                len: self.data.len(),
            });
        }
        Ok(DMatrix::from_row_iterator(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| T::lit(v)),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_major_round_trip() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let j = MatrixJson::from_matrix(&m);
        assert_eq!(j.data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(j.to_matrix::<f64>("m").unwrap(), m);
        let bad = MatrixJson {
            rows: 2,
            cols: 2,
            data: vec![1.0],
        };
        assert!(bad.to_matrix::<f64>("bad").is_err());
    }
}
