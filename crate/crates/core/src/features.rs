//! Labeled feature matrices and the `SFMX` tensor file.
//!
//! `SFMX` layout, little-endian: magic `"SFMX"` | d u32 | N u32 | C u32 |
//! N x d f32 rows | N x u32 labels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const MAGIC: &[u8; 4] = b"SFMX";

/// `N` feature vectors of dimension `d`, each with a class label in `[0, C)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    dim: usize,
    num_classes: usize,
    rows: Vec<Vec<f64>>,
    labels: Vec<u32>,
}

impl FeatureMatrix {
    pub fn new(
        dim: usize,
        num_classes: usize,
        rows: Vec<Vec<f64>>,
        labels: Vec<u32>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("feature dimension must be >= 1"));
        }
        if rows.len() != labels.len() {
            return Err(invalid(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        if let Some(r) = rows.iter().position(|r| r.len() != dim) {
            return Err(invalid(format!(
                "row {r} has length {}, expected {dim}",
                rows[r].len()
            )));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite feature value"));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(invalid(format!(
                "label {l} out of range [0, {num_classes})"
            )));
        }
        Ok(Self {
            dim,
            num_classes,
            rows,
            labels,
        })
    }

    /// Rows without class information (all labelled 0 over one class).
    pub fn unlabeled(dim: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        Self::new(dim, 1, rows, vec![0; n])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    /// Row indices grouped by class, in row order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize].push(i);
        }
        out
    }

    /// Rounds every value to the nearest `f32`, so that the matrix survives an
    /// `SFMX` round trip unchanged.
    pub fn round_to_f32(mut self) -> Self {
        for v in self.rows.iter_mut().flatten() {
            *v = f64::from(*v as f32);
        }
        self
    }

    pub fn concat(&self, other: &FeatureMatrix) -> Result<FeatureMatrix> {
        if self.dim != other.dim {
            return Err(invalid(
                "cannot concatenate matrices of different dimension",
            ));
        }
        let mut rows = self.rows.clone();
        rows.extend(other.rows.iter().cloned());
        let mut labels = self.labels.clone();
        labels.extend(&other.labels);
        FeatureMatrix::new(
            self.dim,
            self.num_classes.max(other.num_classes),
            rows,
            labels,
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.len() * (self.dim * 4 + 4));
        out.extend_from_slice(MAGIC);
        for v in [self.dim, self.len(), self.num_classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in self.rows.iter().flatten() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[0..4] != MAGIC {
            return Err(Error::Format("not an SFMX feature file".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (dim, n, c) = (word(4), word(8), word(12));
        let expected = n
            .checked_mul(dim)
            .and_then(|nd| nd.checked_add(n))
            .and_then(|w| w.checked_mul(4))
            .and_then(|b| b.checked_add(16));
        if expected != Some(bytes.len()) {
            return Err(Error::Format(format!(
                "SFMX header (d={dim}, N={n}) does not match file length {}",
                bytes.len()
            )));
        }
        let floats: Vec<f64> = bytes[16..16 + n * dim * 4]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let rows = if dim == 0 {
            Vec::new()
        } else {
            floats.chunks(dim).map(<[f64]>::to_vec).collect()
        };
        let labels = bytes[16 + n * dim * 4..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        FeatureMatrix::new(dim, c, rows, labels).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sfmx_roundtrip() {
        let m = FeatureMatrix::new(
            2,
            3,
            vec![vec![1.0, -0.5], vec![0.25, 3.0], vec![0.1, 0.2]],
            vec![0, 2, 1],
        )
        .unwrap()
        .round_to_f32();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[0..4], b"SFMX");
        assert_eq!(bytes.len(), 16 + 3 * 2 * 4 + 3 * 4);
        assert_eq!(FeatureMatrix::from_bytes(&bytes).unwrap(), m);
        assert!(FeatureMatrix::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(FeatureMatrix::from_bytes(&bad).is_err());
    }

    #[test]
    fn validation() {
        assert!(FeatureMatrix::new(2, 2, vec![vec![1.0]], vec![0]).is_err());
        assert!(FeatureMatrix::new(1, 2, vec![vec![1.0]], vec![2]).is_err());
        assert!(FeatureMatrix::new(0, 2, vec![], vec![]).is_err());
        assert!(FeatureMatrix::new(1, 2, vec![vec![f64::NAN]], vec![0]).is_err());
    }
}
