//! Shared value types: linear queries, canonical query keys, histograms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A linear counting query: coefficients over the histogram bins. The query
/// answer is the inner product with the data vector.
pub type Query = Vec<f64>;

/// Scale used when canonicalizing query coefficients: values are rounded to
/// 12 decimal digits before hashing, so membership checks are exact on
/// integer/rational coefficients and tolerant of float dust.
const CANON_SCALE: f64 = 1e12;

/// Hashable exact-match key for a query vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CanonicalQuery(Box<[i64]>);

impl CanonicalQuery {
    pub fn from_coefficients(q: &[f64]) -> Self {
        CanonicalQuery(
            q.iter()
                .map(|&v| (v * CANON_SCALE).round() as i64)
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// The private histogram x the curator protects. Entries are bin counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataVector(Vec<f64>);

impl DataVector {
    pub fn new(bins: Vec<f64>) -> Result<Self> {
        if bins.is_empty() {
            return Err(Error::domain("data vector must be nonempty"));
        }
        if bins.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("data vector entries must be finite"));
        }
        Ok(DataVector(bins))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// True (non-private) answer of a linear query against this histogram.
    pub fn answer(&self, query: &[f64]) -> f64 {
        debug_assert_eq!(query.len(), self.0.len());
        query.iter().zip(&self.0).map(|(q, x)| q * x).sum()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}
