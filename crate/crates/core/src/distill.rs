//! Sample scoring and one-shot dataset pruning.
//!
//! Every sample gets three scores from a model trained on its domain:
//! the mean distance to same-domain negatives, the distance to its identity
//! centroid, and whether any part head mispredicts its identity. A
//! [`RemovalStrategy`] turns the scores into a per-domain priority order and
//! the top `floor(fraction·N_domain)` samples are removed, never emptying an
//! identity.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::formats;
use crate::net::ModelState;
use crate::registry::Registry;
use crate::rng::Rng;
use crate::synth::fraction_count;
use crate::types::{sq_dist, DomainId, FeatureStore, IdentityId, Sample};

/// Embeddings of every store sample, row `i` for `store.sample(i)`.
#[derive(Debug, Clone)]
pub struct StoreEmbeddings {
    rows: Array2<f64>,
}

impl StoreEmbeddings {
    pub fn from_fn(store: &FeatureStore, mut embed: impl FnMut(&Sample) -> Vec<f64>) -> Result<Self> {
        let vecs: Vec<Vec<f64>> = store.samples().iter().map(&mut embed).collect();
        let d = vecs.first().map_or(0, Vec::len);
        if vecs.iter().any(|v| v.len() != d) {
            return Err(Error::invalid("embedding function returned ragged vectors"));
        }
        let flat: Vec<f64> = vecs.into_iter().flatten().collect();
        Ok(Self {
            rows: Array2::from_shape_vec((store.len(), d), flat).expect("shape checked"),
        })
    }

    pub fn from_matrix(store: &FeatureStore, rows: Array2<f64>) -> Result<Self> {
        if rows.nrows() != store.len() {
            return Err(Error::invalid("one embedding row per store sample is required"));
        }
        Ok(Self { rows })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i).to_slice().expect("standard layout")
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.rows
    }
}

fn index_of(store: &FeatureStore, id: u64) -> Result<usize> {
    store
        .index_of(id)
        .ok_or_else(|| Error::NotFound(format!("sample {id}")))
}

/// Mean Euclidean distance from `anchor` to the samples of other identities in
/// its own domain.
pub fn mean_negative_distance(anchor: u64, store: &FeatureStore, emb: &StoreEmbeddings) -> Result<f64> {
    let a = index_of(store, anchor)?;
    let me = store.sample(a).identity;
    let fa = emb.row(a);
    let (mut sum, mut n) = (0.0, 0usize);
    for (j, s) in store.samples().iter().enumerate() {
        if s.domain() == me.domain && s.identity != me {
            sum += sq_dist(fa, emb.row(j)).sqrt();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoNegatives { sample: anchor });
    }
    Ok(sum / n as f64)
}

/// Arithmetic mean of the embeddings of `identity`'s samples.
pub fn identity_centroid(identity: IdentityId, store: &FeatureStore, emb: &StoreEmbeddings) -> Result<Vec<f64>> {
    let members = store
        .identity_indices(identity)
        .ok_or_else(|| Error::NotFound(format!("identity {identity}")))?;
    let d = emb.matrix().ncols();
    let mut c = vec![0.0; d];
    for &i in members {
        for (acc, v) in c.iter_mut().zip(emb.row(i)) {
            *acc += v;
        }
    }
    let n = members.len() as f64;
    c.iter_mut().for_each(|v| *v /= n);
    Ok(c)
}

/// Distance from a sample's embedding to its identity centroid.
pub fn intra_distance(sample: u64, store: &FeatureStore, emb: &StoreEmbeddings) -> Result<f64> {
    let i = index_of(store, sample)?;
    let c = identity_centroid(store.sample(i).identity, store, emb)?;
    Ok(sq_dist(emb.row(i), &c).sqrt())
}

/// True iff any part-level prediction differs from the label.
pub fn part_failure(predictions: &[usize], label: usize) -> Result<bool> {
    if predictions.is_empty() {
        return Err(Error::invalid("part failure needs at least one part prediction"));
    }
    Ok(predictions.iter().any(|&p| p != label))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleScores {
    pub sample_id: u64,
    /// `None` when the sample's domain holds no other identity.
    pub mean_dist: Option<f64>,
    pub intra_dist: f64,
    pub failure: bool,
}

/// Scores every sample; `failures[i]` is the part-failure flag of sample `i`.
pub fn score_samples(store: &FeatureStore, emb: &StoreEmbeddings, failures: &[bool]) -> Result<Vec<SampleScores>> {
    if failures.len() != store.len() {
        return Err(Error::invalid("one failure flag per sample is required"));
    }
    let centroids: BTreeMap<IdentityId, Vec<f64>> = store
        .identities()
        .map(|id| identity_centroid(id, store, emb).map(|c| (id, c)))
        .collect::<Result<_>>()?;
    store
        .samples()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mean_dist = match mean_negative_distance(s.id, store, emb) {
                Ok(v) => Some(v),
                Err(Error::NoNegatives { .. }) => None,
                Err(e) => return Err(e),
            };
            Ok(SampleScores {
                sample_id: s.id,
                mean_dist,
                intra_dist: sq_dist(emb.row(i), &centroids[&s.identity]).sqrt(),
                failure: failures[i],
            })
        })
        .collect()
}

/// Scores every sample with `model`: embeddings under the sample's own
/// branch (or output averaging for unseen domains) and part predictions
/// against the model's class space.
pub fn score_with_model(store: &FeatureStore, model: &ModelState) -> Result<Vec<SampleScores>> {
    let refs: Vec<&Sample> = store.samples().iter().collect();
    let (emb, logits) = model.embed_samples(&refs, None)?;
    let preds = ModelState::part_predictions(&logits);
    let failures = store
        .samples()
        .iter()
        .zip(&preds)
        .map(|(s, p)| {
            let label = model.class_of(s.identity).ok_or_else(|| {
                Error::NotFound(format!("identity {} is outside the model's class space", s.identity))
            })?;
            part_failure(p, label)
        })
        .collect::<Result<Vec<bool>>>()?;
    score_samples(store, &StoreEmbeddings::from_matrix(store, emb)?, &failures)
}

/// Orders one domain's samples by removal priority.
pub trait RemovalStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Store indices of `candidates` (one domain, ascending id) from first to
    /// last to remove. Samples left out are never removed.
    fn priority(&self, candidates: &[usize], scores: &[SampleScores], rng: &mut Rng) -> Vec<usize>;
}

/// Largest mean negative distance first: samples already far from every
/// negative add little to metric learning.
pub struct Redundancy;

impl RemovalStrategy for Redundancy {
    fn name(&self) -> &'static str {
        "redundancy"
    }
    fn priority(&self, candidates: &[usize], scores: &[SampleScores], _rng: &mut Rng) -> Vec<usize> {
        let mut ranked: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|&i| scores[i].mean_dist.is_some())
            .collect();
        // stable sort: equal scores keep ascending id order
        ranked.sort_by(|&a, &b| scores[b].mean_dist.unwrap().total_cmp(&scores[a].mean_dist.unwrap()));
        ranked
    }
}

/// Part-prediction failures first (ascending id), then largest distance to
/// the identity centroid.
pub struct Noise;

impl RemovalStrategy for Noise {
    fn name(&self) -> &'static str {
        "noise"
    }
    fn priority(&self, candidates: &[usize], scores: &[SampleScores], _rng: &mut Rng) -> Vec<usize> {
        let (mut out, mut rest): (Vec<usize>, Vec<usize>) =
            candidates.iter().copied().partition(|&i| scores[i].failure);
        rest.sort_by(|&a, &b| scores[b].intra_dist.total_cmp(&scores[a].intra_dist));
        out.extend(rest);
        out
    }
}

/// Uniformly random order; the baseline targeted pruning is compared against.
pub struct RandomRemoval;

impl RemovalStrategy for RandomRemoval {
    fn name(&self) -> &'static str {
        "random"
    }
    fn priority(&self, candidates: &[usize], _scores: &[SampleScores], rng: &mut Rng) -> Vec<usize> {
        let mut out = candidates.to_vec();
        rng.shuffle(&mut out);
        out
    }
}

pub fn strategies() -> Registry<dyn RemovalStrategy> {
    let mut r: Registry<dyn RemovalStrategy> = Registry::new("removal strategy");
    r.register("redundancy", Arc::new(Redundancy));
    r.register("noise", Arc::new(Noise));
    r.register("random", Arc::new(RandomRemoval));
    r
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillPolicy {
    /// Registered strategy name: `redundancy`, `noise` or `random`.
    pub mode: String,
    /// Fraction of each domain's samples to remove, in [0, 1).
    pub removal_fraction: f64,
    /// Only consumed by strategies that draw randomness.
    pub seed: u64,
}

impl DistillPolicy {
    pub fn new(mode: &str, removal_fraction: f64) -> Result<Self> {
        let p = Self {
            mode: mode.to_string(),
            removal_fraction,
            seed: 0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.removal_fraction) {
            return Err(Error::invalid(format!(
                "removal fraction {} outside [0, 1)",
                self.removal_fraction
            )));
        }
        strategies().get(&self.mode).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillReport {
    pub scores: Vec<SampleScores>,
    /// Ascending.
    pub removed_ids: Vec<u64>,
    pub policy: DistillPolicy,
    /// SHA-256 of the retained store's feature-file serialization.
    pub retained_digest: String,
    /// Budgeted removals skipped because they would have emptied an identity.
    pub shortfall: usize,
}

impl DistillReport {
    pub fn retained(&self, store: &FeatureStore) -> FeatureStore {
        let removed: BTreeSet<u64> = self.removed_ids.iter().copied().collect();
        store.filter(|s| !removed.contains(&s.id))
    }
}

/// Applies `policy` to precomputed scores (aligned with the store's order).
pub fn select(store: &FeatureStore, scores: Vec<SampleScores>, policy: &DistillPolicy) -> Result<DistillReport> {
    policy.validate()?;
    if scores.len() != store.len() || scores.iter().zip(store.samples()).any(|(sc, s)| sc.sample_id != s.id) {
        return Err(Error::invalid("scores are not aligned with the store"));
    }
    let strategy = strategies().get(&policy.mode)?;
    let mut rng = Rng::stream(policy.seed, 0x5EED);

    let mut by_domain: BTreeMap<DomainId, Vec<usize>> = BTreeMap::new();
    for (i, s) in store.samples().iter().enumerate() {
        by_domain.entry(s.domain()).or_default().push(i);
    }
    let mut remaining: BTreeMap<IdentityId, usize> = store
        .identities()
        .map(|id| (id, store.identity_indices(id).unwrap().len()))
        .collect();

    let mut removed = Vec::new();
    let mut shortfall = 0;
    for (_, members) in by_domain {
        let budget = fraction_count(policy.removal_fraction, members.len());
        let mut taken = 0;
        for i in strategy.priority(&members, &scores, &mut rng) {
            if taken == budget {
                break;
            }
            let left = remaining.get_mut(&store.sample(i).identity).unwrap();
            if *left <= 1 {
                continue;
            }
            *left -= 1;
            removed.push(store.sample(i).id);
            taken += 1;
        }
        shortfall += budget - taken;
    }
    removed.sort_unstable();

    let mut report = DistillReport {
        scores,
        removed_ids: removed,
        policy: policy.clone(),
        retained_digest: String::new(),
        shortfall,
    };
    report.retained_digest = formats::store_digest(&report.retained(store));
    Ok(report)
}

/// Scores `store` with `model` and prunes it according to `policy`.
pub fn distill(store: &FeatureStore, model: &ModelState, policy: &DistillPolicy) -> Result<DistillReport> {
    policy.validate()?;
    let scores = score_with_model(store, model)?;
    select(store, scores, policy)
}
