//! Dataset-affinity metrics: cosine similarity between domain mean signatures
//! (low level) or domain embedding centroids (high level), and their
//! correlation with cross-domain transfer accuracy.
//!
//! Cosine is a stand-in; the similarity functional is labelled as such in
//! every written matrix.

use std::fmt;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::formats;
use crate::net::{InferenceNorm, ModelState};
use crate::types::{DomainId, FeatureStore, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AffinityLevel {
    /// Raw signatures.
    Low,
    /// Learned embeddings.
    High,
}

impl fmt::Display for AffinityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AffinityLevel::Low => "low",
            AffinityLevel::High => "high",
        })
    }
}

/// Symmetric, unit-diagonal cosine-similarity matrix over domains.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub level: AffinityLevel,
    pub domains: Vec<DomainId>,
    pub values: Array2<f64>,
}

impl AffinityMatrix {
    /// Cosine similarity matrix of per-domain vectors.
    pub fn from_vectors(level: AffinityLevel, domains: Vec<DomainId>, vectors: &[Vec<f64>]) -> Result<Self> {
        let norms: Vec<f64> = vectors
            .iter()
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        for (d, n) in domains.iter().zip(&norms) {
            if !(*n > 0.0 && n.is_finite()) {
                return Err(Error::UndefinedSimilarity(format!(
                    "domain {d} has a zero-norm {level} mean vector"
                )));
            }
        }
        let n = vectors.len();
        let mut values = Array2::zeros((n, n));
        for i in 0..n {
            values[[i, i]] = 1.0;
            for j in i + 1..n {
                let dot: f64 = vectors[i].iter().zip(&vectors[j]).map(|(a, b)| a * b).sum();
                let c = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
                values[[i, j]] = c;
                values[[j, i]] = c;
            }
        }
        Ok(Self { level, domains, values })
    }

    pub fn get(&self, a: DomainId, b: DomainId) -> Option<f64> {
        let i = self.domains.iter().position(|&d| d == a)?;
        let j = self.domains.iter().position(|&d| d == b)?;
        Some(self.values[[i, j]])
    }

    pub fn to_text(&self) -> String {
        formats::write_matrix(
            formats::AFFINITY_VERSION,
            &[("level", self.level.to_string()), ("similarity", "cosine".into())],
            &self.domains,
            &self.values,
        )
    }
}

fn mean_vector(samples: &[&Sample], dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    for s in samples {
        for (a, x) in m.iter_mut().zip(&s.signature) {
            *a += x;
        }
    }
    m.iter_mut().for_each(|a| *a /= samples.len() as f64);
    m
}

fn domain_samples(store: &FeatureStore, d: DomainId) -> Vec<&Sample> {
    store.samples().iter().filter(|s| s.domain() == d).collect()
}

/// Cosine similarity between the mean raw signatures of every domain in `store`.
pub fn low_level_affinity(store: &FeatureStore) -> Result<AffinityMatrix> {
    let domains = store.domains();
    if domains.is_empty() {
        return Err(Error::invalid("affinity needs at least one domain"));
    }
    let means: Vec<Vec<f64>> = domains
        .iter()
        .map(|&d| mean_vector(&domain_samples(store, d), store.dim()))
        .collect();
    AffinityMatrix::from_vectors(AffinityLevel::Low, domains, &means)
}

/// Cosine similarity between per-domain embedding centroids, with every
/// domain embedded under output-averaging normalization.
pub fn high_level_affinity(store: &FeatureStore, model: &ModelState) -> Result<AffinityMatrix> {
    let domains = store.domains();
    if domains.is_empty() {
        return Err(Error::invalid("affinity needs at least one domain"));
    }
    let mut centroids = Vec::with_capacity(domains.len());
    for &d in &domains {
        let samples = domain_samples(store, d);
        let (emb, _) = model.embed_samples(&samples, Some(InferenceNorm::Average))?;
        let c = emb.mean_axis(ndarray::Axis(0)).expect("domain has samples");
        centroids.push(c.to_vec());
    }
    AffinityMatrix::from_vectors(AffinityLevel::High, domains, &centroids)
}

/// Pearson correlation between affinity and cross-domain rank-1 over ordered
/// (train, test) pairs with train ≠ test. `cross_rank1[[i, j]]` is rank-1 of a
/// model trained on `affinity.domains[i]` tested on `affinity.domains[j]`.
pub fn affinity_accuracy_correlation(affinity: &AffinityMatrix, cross_rank1: &Array2<f64>) -> Result<f64> {
    let n = affinity.domains.len();
    if cross_rank1.dim() != (n, n) {
        return Err(Error::invalid(format!(
            "accuracy matrix is {:?}, affinity covers {n} domains",
            cross_rank1.dim()
        )));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                xs.push(affinity.values[[i, j]]);
                ys.push(cross_rank1[[i, j]]);
            }
        }
    }
    if xs.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "correlation needs at least 3 off-diagonal pairs, have {}",
            xs.len()
        )));
    }
    pearson(&xs, &ys)
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedSimilarity(
            "correlation is undefined when one side is constant".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}
