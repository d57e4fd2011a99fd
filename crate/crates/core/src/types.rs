//! Domain types shared across the crate.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

/// Index of a source dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DomainId(pub u32);

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Identity label namespaced by its domain: equal labels in different domains
/// are different people.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct IdentityId {
    pub domain: DomainId,
    pub label: u32,
}

impl IdentityId {
    pub fn new(domain: u32, label: u32) -> Self {
        Self {
            domain: DomainId(domain),
            label,
        }
    }
}

impl fmt::Display for IdentityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.domain.0, self.label)
    }
}

/// Ground-truth corruption flag carried by synthetic samples only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Flag {
    Duplicate,
    Outlier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub identity: IdentityId,
    pub signature: Vec<f64>,
    pub flag: Option<Flag>,
}

impl Sample {
    pub fn domain(&self) -> DomainId {
        self.identity.domain
    }
}

/// Contiguous segments `[start, end)` of a vector split into `p` equal parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartLayout {
    pub bounds: Vec<(usize, usize)>,
}

impl PartLayout {
    pub fn new(len: usize, parts: usize) -> Result<Self> {
        if parts == 0 || !len.is_multiple_of(parts) {
            return Err(Error::invalid(format!("{parts} parts do not divide length {len}")));
        }
        let w = len / parts;
        Ok(Self {
            bounds: (0..parts).map(|j| (j * w, (j + 1) * w)).collect(),
        })
    }

    pub fn parts(&self) -> usize {
        self.bounds.len()
    }
}

/// An indexed, id-ordered collection of samples sharing one dimensionality.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    samples: Vec<Sample>,
    by_identity: BTreeMap<IdentityId, Vec<usize>>,
    parts: Option<PartLayout>,
}

impl FeatureStore {
    pub fn new(dim: usize, mut samples: Vec<Sample>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("store dimensionality must be positive"));
        }
        samples.sort_by_key(|s| s.id);
        for w in samples.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::invalid(format!("duplicate sample id {}", w[0].id)));
            }
        }
        let mut by_identity: BTreeMap<IdentityId, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if s.signature.len() != dim {
                return Err(Error::invalid(format!(
                    "sample {} has {} features, store expects {dim}",
                    s.id,
                    s.signature.len()
                )));
            }
            if s.signature.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("sample {} has non-finite features", s.id)));
            }
            by_identity.entry(s.identity).or_default().push(i);
        }
        Ok(Self {
            dim,
            samples,
            by_identity,
            parts: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples in ascending id order.
    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, index: usize) -> &Sample {
        &self.samples[index]
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.samples.binary_search_by_key(&id, |s| s.id).ok()
    }

    pub fn get(&self, id: u64) -> Option<&Sample> {
        self.index_of(id).map(|i| &self.samples[i])
    }

    /// Sample indices of one identity, ascending id.
    pub fn identity_indices(&self, identity: IdentityId) -> Option<&[usize]> {
        self.by_identity.get(&identity).map(Vec::as_slice)
    }

    pub fn identities(&self) -> impl Iterator<Item = IdentityId> + '_ {
        self.by_identity.keys().copied()
    }

    pub fn identities_in(&self, domain: DomainId) -> Vec<IdentityId> {
        self.by_identity
            .keys()
            .filter(|i| i.domain == domain)
            .copied()
            .collect()
    }

    /// Map from domain to number of identities, ascending domain order.
    pub fn domain_table(&self) -> BTreeMap<DomainId, usize> {
        let mut table = BTreeMap::new();
        for id in self.by_identity.keys() {
            *table.entry(id.domain).or_insert(0) += 1;
        }
        table
    }

    pub fn domains(&self) -> Vec<DomainId> {
        self.domain_table().into_keys().collect()
    }

    pub fn part_layout(&self) -> Option<&PartLayout> {
        self.parts.as_ref()
    }

    pub(crate) fn set_part_layout(&mut self, layout: PartLayout) {
        self.parts = Some(layout);
    }

    /// Sub-store of the samples accepted by `keep`.
    pub fn filter(&self, mut keep: impl FnMut(&Sample) -> bool) -> FeatureStore {
        let samples: Vec<Sample> = self.samples.iter().filter(|s| keep(s)).cloned().collect();
        let mut out = FeatureStore::new(self.dim, samples).expect("subset of a valid store");
        out.parts = self.parts.clone();
        out
    }

    pub fn domain_subset(&self, domains: &[DomainId]) -> FeatureStore {
        self.filter(|s| domains.contains(&s.domain()))
    }

    /// Union of stores with disjoint sample ids and disjoint domains.
    pub fn merge(stores: &[&FeatureStore]) -> Result<FeatureStore> {
        let dim = stores.first().ok_or_else(|| Error::invalid("nothing to merge"))?.dim;
        let mut seen = BTreeMap::new();
        let mut samples = Vec::new();
        for (k, s) in stores.iter().enumerate() {
            for d in s.domains() {
                if let Some(prev) = seen.insert(d, k) {
                    if prev != k {
                        return Err(Error::invalid(format!("domain {d} appears in more than one store")));
                    }
                }
            }
            samples.extend(s.samples.iter().cloned());
        }
        FeatureStore::new(dim, samples)
    }
}

/// Euclidean distance between two equal-length vectors.
pub fn euclidean(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(sq_dist(a, b).sqrt())
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
