//! Row-major storage for sets of d-dimensional points.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `len() × dim` array of reals, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    dim: usize,
    coords: Vec<f64>,
}

impl PointSet {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::domain("dim", "dimension must be at least 1"));
        }
        if !coords.len().is_multiple_of(dim) {
            return Err(Error::domain(
                "coords",
                format!("{} values do not form rows of length {dim}", coords.len()),
            ));
        }
        Ok(Self { dim, coords })
    }

    /// One-dimensional point set.
    pub fn from_scalars(values: &[f64]) -> Self {
        Self {
            dim: 1,
            coords: values.to_vec(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(1);
        let mut coords = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::domain(
                    "rows",
                    format!("row {i} has length {} but expected {dim}", row.len()),
                ));
            }
            coords.extend_from_slice(row);
        }
        Self::new(dim, coords)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.coords.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coords
    }

    pub(crate) fn push(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.dim);
        self.coords.extend_from_slice(row);
    }

    /// Rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> PointSet {
        PointSet {
            dim: self.dim,
            coords: self.coords[start * self.dim..end * self.dim].to_vec(),
        }
    }

    /// Rows at indices `0, stride, 2·stride, …`.
    pub fn stride(&self, stride: usize) -> PointSet {
        let stride = stride.max(1);
        let mut out = PointSet {
            dim: self.dim,
            coords: Vec::with_capacity(self.coords.len() / stride + self.dim),
        };
        for row in self.rows().step_by(stride) {
            out.push(row);
        }
        out
    }

    /// Largest coordinate-wise range `max - min` over all axes.
    pub fn spread(&self) -> f64 {
        (0..self.dim)
            .map(|k| {
                let (lo, hi) = self
                    .rows()
                    .map(|r| r[k])
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                        (lo.min(v), hi.max(v))
                    });
                if self.is_empty() {
                    0.0
                } else {
                    hi - lo
                }
            })
            .fold(0.0, f64::max)
    }

    /// Negate every coordinate.
    pub fn negated(&self) -> PointSet {
        PointSet {
            dim: self.dim,
            coords: self.coords.iter().map(|v| -v).collect(),
        }
    }
}
