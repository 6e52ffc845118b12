//! Embedding providers and the exact cosine vector index of the refined layer.

mod index;
mod provider;

pub use index::{IndexEntry, IndexMeta, Payload, RetrievalHit, VectorIndex};
pub use provider::{embed, embed_all, EmbeddingProvider, HashingEmbedder, HttpEmbedder, MOCK_DEFAULT_DIM};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbedIndexError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("embedding provider failure: {0}")]
    ProviderFailure(String),
    #[error("index i/o failure on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt index file {path}: {detail}")]
    Corrupt { path: std::path::PathBuf, detail: String },
}

/// A dense embedding. Unit L2 norm, except the all-zero sentinel produced for
/// empty text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    /// Scales `values` to unit norm; an all-zero input stays zero.
    pub fn normalized(values: Vec<f64>) -> Self {
        let norm = l2_norm(&values);
        if norm == 0.0 {
            Self(values)
        } else {
            Self(values.into_iter().map(|v| v / norm).collect())
        }
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedIndexError> {
    if a.dim() != b.dim() {
        return Err(EmbedIndexError::DimMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let (na2, nb2) = (sq(&a.0), sq(&b.0));
    if na2 == 0.0 || nb2 == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    // sqrt(s * s) == s exactly, so identical vectors score exactly 1
    Ok((dot / (na2 * nb2).sqrt()).clamp(-1.0, 1.0))
}
