//! Labelled feature vectors tagged with their source domain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Which domain a sample came from. Encoded as a single bit wherever it is
/// fed to a network or written to disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Photo,
    Sketch,
}

impl Domain {
    #[inline]
    pub fn bit(self) -> f64 {
        match self {
            Domain::Photo => 0.0,
            Domain::Sketch => 1.0,
        }
    }

    pub fn to_byte(self) -> u8 {
        match self {
            Domain::Photo => 0,
            Domain::Sketch => 1,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Domain::Photo),
            1 => Ok(Domain::Sketch),
            other => Err(Error::Format(format!("domain byte {other} is not 0 or 1"))),
        }
    }
}

/// `N × D` feature matrix with one class label and one domain tag per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBatch {
    vectors: Matrix,
    labels: Vec<usize>,
    domains: Vec<Domain>,
}

impl EmbeddingBatch {
    pub fn new(vectors: Matrix, labels: Vec<usize>, domains: Vec<Domain>) -> Result<Self> {
        if labels.len() != vectors.rows() || domains.len() != vectors.rows() {
            return Err(Error::DimensionMismatch(format!(
                "{} vectors, {} labels, {} domains",
                vectors.rows(),
                labels.len(),
                domains.len()
            )));
        }
        if !vectors.is_finite() {
            return Err(Error::NonFinite("embedding vectors"));
        }
        Ok(Self {
            vectors,
            labels,
            domains,
        })
    }

    /// Batch with every sample tagged as a photo.
    pub fn single_domain(vectors: Matrix, labels: Vec<usize>) -> Result<Self> {
        let n = vectors.rows();
        Self::new(vectors, labels, vec![Domain::Photo; n])
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    /// One past the largest label, or 0 for an empty batch.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    /// Ensures every label indexes one of `classes` classes.
    pub fn check_labels(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= classes) {
            Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
            None => Ok(()),
        }
    }

    pub fn select(&self, idx: &[usize]) -> EmbeddingBatch {
        EmbeddingBatch {
            vectors: self.vectors.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            domains: idx.iter().map(|&i| self.domains[i]).collect(),
        }
    }

    pub fn filter<F: Fn(usize, Domain) -> bool>(&self, keep: F) -> EmbeddingBatch {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| keep(self.labels[i], self.domains[i]))
            .collect();
        self.select(&idx)
    }

    pub fn domain(&self, domain: Domain) -> EmbeddingBatch {
        self.filter(|_, d| d == domain)
    }

    /// Same labels and domains with new vectors (e.g. an encoder's output).
    pub fn with_vectors(&self, vectors: Matrix) -> Result<EmbeddingBatch> {
        Self::new(vectors, self.labels.clone(), self.domains.clone())
    }

    pub fn into_parts(self) -> (Matrix, Vec<usize>, Vec<Domain>) {
        (self.vectors, self.labels, self.domains)
    }
}
