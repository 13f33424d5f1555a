//! Row-major feature clouds.

use crate::error::{Error, Result};
use crate::sphere::{norm, UnitVector};

/// Tolerance on row norms for matrices flagged as normalized.
pub const ROW_UNIT_TOLERANCE: f64 = 1e-6;

/// An `N × d` matrix of row features stored row-major.
///
/// `normalized` records that every row is on the unit sphere (checked at
/// construction to within [`ROW_UNIT_TOLERANCE`]).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    n_rows: usize,
    dim: usize,
    normalized: bool,
}

impl FeatureMatrix {
    /// Builds an unflagged matrix; entries must be finite.
    pub fn new(data: Vec<f64>, n_rows: usize, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::ShapeMismatch("dimension must be positive".into()));
        }
        if data.len() != n_rows * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} entries cannot form {n_rows}x{dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite entry at row {}, column {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self {
            data,
            n_rows,
            dim,
            normalized: false,
        })
    }

    /// Builds a matrix and flags it normalized after checking every row.
    pub fn new_normalized(data: Vec<f64>, n_rows: usize, dim: usize) -> Result<Self> {
        Self::new(data, n_rows, dim)?.into_normalized()
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).ok_or(Error::EmptyMatrix)?;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "row {i} has length {}, expected {dim}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(data, rows.len(), dim)
    }

    pub fn from_unit_rows(rows: &[UnitVector]) -> Result<Self> {
        Self::from_rows(rows)?.into_normalized()
    }

    /// Checks every row for unit norm and sets the flag.
    pub fn into_normalized(self) -> Result<Self> {
        self.into_normalized_within(ROW_UNIT_TOLERANCE)
    }

    /// As [`into_normalized`](Self::into_normalized) with an explicit tolerance.
    pub fn into_normalized_within(mut self, tol: f64) -> Result<Self> {
        self.check_unit_rows(tol)?;
        self.normalized = true;
        Ok(self)
    }

    pub fn check_unit_rows(&self, tol: f64) -> Result<()> {
        for (i, row) in self.rows().enumerate() {
            let n = norm(row);
            if (n - 1.0).abs() > tol {
                return Err(Error::NotNormalized { row: i, norm: n });
            }
        }
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.n_rows == other.n_rows && self.dim == other.dim
    }

    /// New matrix holding the given rows in the given order; keeps the flag.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            if i >= self.n_rows {
                return Err(Error::ShapeMismatch(format!(
                    "row index {i} out of range for {} rows",
                    self.n_rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            data,
            n_rows: indices.len(),
            dim: self.dim,
            normalized: self.normalized,
        })
    }

    pub(crate) fn ensure_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {}x{} vs {}x{}",
                self.n_rows, self.dim, other.n_rows, other.dim
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_validates_shape_and_values() {
        assert!(FeatureMatrix::new(vec![1.0; 6], 2, 3).is_ok());
        assert!(FeatureMatrix::new(vec![1.0; 5], 2, 3).is_err());
        assert!(FeatureMatrix::new(vec![1.0, f64::INFINITY], 1, 2).is_err());
        assert!(FeatureMatrix::new(vec![], 0, 4).is_ok());
    }

    #[test]
    fn normalized_flag_requires_unit_rows() {
        let ok = FeatureMatrix::new_normalized(vec![1.0, 0.0, 0.6, 0.8], 2, 2).unwrap();
        assert!(ok.is_normalized());
        let err = FeatureMatrix::new_normalized(vec![1.0, 0.0, 0.6, 0.9], 2, 2).unwrap_err();
        assert!(matches!(err, Error::NotNormalized { row: 1, .. }));
    }

    #[test]
    fn select_rows_reorders() {
        let m = FeatureMatrix::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3, 2).unwrap();
        let s = m.select_rows(&[2, 0]).unwrap();
        assert_eq!(s.as_slice(), &[5.0, 6.0, 1.0, 2.0]);
        assert!(m.select_rows(&[3]).is_err());
    }
}
