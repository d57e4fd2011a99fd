//! Mixed-dataset P×K batch sampling and the multi-step learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::types::{DomainId, FeatureStore};

/// Per-domain (P identities, K samples per identity).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSpec {
    per_domain: BTreeMap<DomainId, (usize, usize)>,
}

impl BatchSpec {
    pub fn new(per_domain: BTreeMap<DomainId, (usize, usize)>) -> Result<Self> {
        if per_domain.is_empty() {
            return Err(Error::invalid("batch spec needs at least one domain"));
        }
        for (d, &(p, k)) in &per_domain {
            if p < 2 || k < 2 {
                return Err(Error::invalid(format!(
                    "domain {d}: P and K must both be at least 2 (got {p}, {k})"
                )));
            }
        }
        Ok(Self { per_domain })
    }

    pub fn uniform(domains: &[DomainId], p: usize, k: usize) -> Result<Self> {
        Self::new(domains.iter().map(|&d| (d, (p, k))).collect())
    }

    pub fn get(&self, d: DomainId) -> Option<(usize, usize)> {
        self.per_domain.get(&d).copied()
    }

    pub fn domains(&self) -> Vec<DomainId> {
        self.per_domain.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (DomainId, (usize, usize))> + '_ {
        self.per_domain.iter().map(|(&d, &pk)| (d, pk))
    }

    /// B = Σ P_k·K_k
    pub fn batch_size(&self) -> usize {
        self.per_domain.values().map(|&(p, k)| p * k).sum()
    }
}

/// Draws one mixed batch as store indices, grouped by ascending domain.
///
/// For each domain: `P` identities uniformly without replacement, then `K`
/// samples of each. Identities with at least `K` samples are sampled without
/// replacement; smaller ones contribute every sample once and fill the rest
/// with replacement.
pub fn sample_batch(store: &FeatureStore, spec: &BatchSpec, rng: &mut Rng) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(spec.batch_size());
    for (domain, (p, k)) in spec.iter() {
        let identities = store.identities_in(domain);
        if identities.len() < p {
            return Err(Error::invalid(format!(
                "domain {domain} has {} identities, batch spec asks for {p}",
                identities.len()
            )));
        }
        for pick in rng.choose_indices(identities.len(), p) {
            let members = store
                .identity_indices(identities[pick])
                .expect("identity listed by the store");
            if members.len() >= k {
                out.extend(rng.choose_indices(members.len(), k).into_iter().map(|i| members[i]));
            } else {
                let mut chosen: Vec<usize> = members.to_vec();
                while chosen.len() < k {
                    chosen.push(members[rng.below(members.len())]);
                }
                rng.shuffle(&mut chosen);
                out.extend(chosen);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_steps: Vec<usize>,
    pub decay_factor: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(initial: f64, decay_steps: Vec<usize>, decay_factor: f64, total_steps: usize) -> Result<Self> {
        let s = Self {
            initial,
            decay_steps,
            decay_factor,
            total_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial.is_finite() && self.initial >= 0.0) {
            return Err(Error::invalid("initial learning rate must be finite and non-negative"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::invalid("decay factor must lie in (0, 1)"));
        }
        if self.decay_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("decay steps must be strictly ascending"));
        }
        if self.decay_steps.last().is_some_and(|&s| s >= self.total_steps) {
            return Err(Error::invalid("decay steps must precede total_steps"));
        }
        Ok(())
    }

    /// `initial · factor^(#decay steps ≤ step)`
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step >= self.total_steps {
            return Err(Error::invalid(format!(
                "step {step} outside schedule of {} steps",
                self.total_steps
            )));
        }
        let decays = self.decay_steps.iter().filter(|&&s| s <= step).count();
        Ok(self.initial * self.decay_factor.powi(decays as i32))
    }
}
