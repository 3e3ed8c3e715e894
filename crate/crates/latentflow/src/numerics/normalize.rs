//! Per-dimension min/max normalization of action vectors to [−1, 1].
//!
//! Statistics come from the training demonstrations; the inverse map is used
//! right before actions are executed. A dimension whose min equals its max
//! carries no information — it maps to 0 and is flagged so callers can warn.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Dimensions where max == min in the training data.
    pub degenerate: Vec<bool>,
}

impl NormStats {
    /// Compute per-dimension extrema over a set of action rows.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::InvalidArgument("no rows to fit normalization".into()))?;
        let dim = first.len();
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        for row in rows {
            if row.len() != dim {
                return Err(Error::ShapeMismatch {
                    expected: vec![dim],
                    got: vec![row.len()],
                    context: "normalization fit".into(),
                });
            }
            for (d, v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite("normalization fit".into()));
                }
                min[d] = min[d].min(*v);
                max[d] = max[d].max(*v);
            }
        }
        let degenerate = min.iter().zip(&max).map(|(a, b)| a == b).collect();
        Ok(Self { min, max, degenerate })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn any_degenerate(&self) -> bool {
        self.degenerate.iter().any(|d| *d)
    }

    /// Map to [−1, 1]: min → −1, max → +1. Degenerate dimensions map to 0.
    /// Values outside the training range are passed through un-clamped;
    /// clamping happens only at execution.
    pub fn normalize(&self, row: &[f64]) -> Vec<f64> {
        assert_eq!(row.len(), self.dim(), "normalize dimension mismatch");
        row.iter()
            .enumerate()
            .map(|(d, v)| {
                if self.degenerate[d] {
                    0.0
                } else {
                    2.0 * (v - self.min[d]) / (self.max[d] - self.min[d]) - 1.0
                }
            })
            .collect()
    }

    /// Inverse of [`NormStats::normalize`]. Degenerate dimensions recover the
    /// constant training value.
    pub fn denormalize(&self, row: &[f64]) -> Vec<f64> {
        assert_eq!(row.len(), self.dim(), "denormalize dimension mismatch");
        row.iter()
            .enumerate()
            .map(|(d, v)| {
                if self.degenerate[d] {
                    self.min[d]
                } else {
                    (v + 1.0) / 2.0 * (self.max[d] - self.min[d]) + self.min[d]
                }
            })
            .collect()
    }

    pub fn normalize_rows(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.normalize(r)).collect()
    }

    pub fn denormalize_rows(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.denormalize(r)).collect()
    }
}
