//! Sample matrices and axis-aligned support boxes.

use serde::{Deserialize, Serialize};

use crate::seed::Seed;
use crate::{Error, Result};

/// An N×d matrix of i.i.d. draws with provenance: which density produced it
/// and under which seed. Immutable after creation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    dim: usize,
    data: Vec<f64>,
    label: String,
    seed: Option<Seed>,
}

impl SampleSet {
    pub fn from_flat(data: Vec<f64>, dim: usize, label: impl Into<String>, seed: Option<Seed>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("dimension must be >= 1".into()));
        }
        if data.is_empty() {
            return Err(Error::EmptyInput("sample set"));
        }
        if data.len() % dim != 0 {
            return Err(Error::InvalidParameter(format!(
                "flat data length {} is not a multiple of dimension {}",
                data.len(),
                dim
            )));
        }
        Ok(Self {
            dim,
            data,
            label: label.into(),
            seed,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], label: impl Into<String>, seed: Option<Seed>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("sample set"));
        }
        let dim = rows[0].len();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::InvalidParameter(format!(
                    "row {i} has length {}, expected {dim}",
                    row.len()
                )));
            }
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            data.extend_from_slice(row);
        }
        Self::from_flat(data, dim, label, seed)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn seed(&self) -> Option<Seed> {
        self.seed
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// New set holding the given rows (by index), keeping provenance.
    pub fn select(&self, indices: &[usize], label: impl Into<String>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyInput("sample subset"));
        }
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self::from_flat(data, self.dim, label, self.seed)
    }
}

/// Axis-aligned box with strictly positive volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                actual: upper.len(),
            });
        }
        if lower.is_empty() {
            return Err(Error::EmptyInput("box bounds"));
        }
        for (l, u) in lower.iter().zip(&upper) {
            if !(l.is_finite() && u.is_finite() && l < u) {
                return Err(Error::InvalidParameter(format!(
                    "box side [{l}, {u}] has nonpositive length"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn unit_cube(dim: usize) -> Self {
        Self {
            lower: vec![0.0; dim],
            upper: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= *l && *v <= *u)
    }

    pub fn volume(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| u - l)
            .product()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_roundtrip() {
        let s = SampleSet::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]], "t", None).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.dim(), 2);
        assert_eq!(s.row(1), &[3.0, 4.0]);
        let picked = s.select(&[1], "u").unwrap();
        assert_eq!(picked.row(0), &[3.0, 4.0]);
    }

    #[test]
    fn ragged_rows_rejected() {
        let err = SampleSet::from_rows(&[vec![1.0], vec![2.0, 3.0]], "t", None).unwrap_err();
        assert!(matches!(err, Error::InvalidParameter(_)));
    }

    #[test]
    fn box_membership() {
        let b = BoxBounds::unit_cube(2);
        assert!(b.contains(&[0.0, 1.0]));
        assert!(!b.contains(&[0.5, 1.5]));
        assert_eq!(b.volume(), 1.0);
        assert!(BoxBounds::new(vec![0.0], vec![0.0]).is_err());
    }
}
