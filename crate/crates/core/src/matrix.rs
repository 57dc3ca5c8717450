//! Row-major `L × F` matrices for per-token continuous states.

use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SeqMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SeqMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                expected: format!("{rows}x{cols} = {} values", rows * cols),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape {
                    expected: format!("{cols} columns"),
                    got: format!("{} columns in row {i}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact on an empty slice with cols == 0 would panic.
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

macro_rules! seq_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name(pub SeqMatrix);

        impl $name {
            pub fn zeros(rows: usize, cols: usize) -> Self {
                Self(SeqMatrix::zeros(rows, cols))
            }

            pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
                SeqMatrix::from_vec(rows, cols, data).map(Self)
            }

            pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
                SeqMatrix::from_rows(rows).map(Self)
            }
        }

        impl Deref for $name {
            type Target = SeqMatrix;
            fn deref(&self) -> &SeqMatrix {
                &self.0
            }
        }

        impl DerefMut for $name {
            fn deref_mut(&mut self) -> &mut SeqMatrix {
                &mut self.0
            }
        }

        impl From<SeqMatrix> for $name {
            fn from(m: SeqMatrix) -> Self {
                Self(m)
            }
        }
    };
}

seq_newtype!(
    /// Data-side representation `v`: one `F`-vector per token position.
    ContinuousRep
);
seq_newtype!(
    /// Base-side latent `z`, distributed as a standard normal under the flow.
    LatentSeq
);
