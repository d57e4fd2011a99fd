//! Triplet and identity losses with analytic gradients.
//!
//! Triplet objectives differ only in which samples an anchor may use as
//! negatives. [`NaiveTriplet`] admits any other identity, so every
//! cross-domain sample is a negative; [`SeparateTriplet`] restricts anchor,
//! positive and negative to one domain. Both are registered by name in
//! [`objectives`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::types::{DomainId, IdentityId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mining {
    /// Every valid (anchor, positive, negative) triple.
    AllValid,
    /// Farthest positive and nearest negative per anchor.
    BatchHard,
}

impl FromStr for Mining {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-valid" => Ok(Mining::AllValid),
            "batch-hard" => Ok(Mining::BatchHard),
            _ => Err(Error::invalid(format!(
                "unknown mining '{s}' (expected all-valid or batch-hard)"
            ))),
        }
    }
}

impl fmt::Display for Mining {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mining::AllValid => "all-valid",
            Mining::BatchHard => "batch-hard",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletConfig {
    pub margin: f64,
    pub mining: Mining,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            mining: Mining::BatchHard,
        }
    }
}

/// Per-domain triplet weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainWeights(BTreeMap<DomainId, f64>);

impl DomainWeights {
    pub fn new(weights: BTreeMap<DomainId, f64>) -> Result<Self> {
        if weights.values().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("domain weights must be finite and non-negative"));
        }
        Ok(Self(weights))
    }

    pub fn uniform(domains: &[DomainId], w: f64) -> Self {
        Self(domains.iter().map(|&d| (d, w)).collect())
    }

    pub fn get(&self, d: DomainId) -> Option<f64> {
        self.0.get(&d).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (DomainId, f64)> + '_ {
        self.0.iter().map(|(&d, &w)| (d, w))
    }

    /// At least one strictly positive weight.
    pub fn has_positive(&self) -> bool {
        self.0.values().any(|&w| w > 0.0)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self(self.0.iter().map(|(&d, &w)| (d, w * c)).collect())
    }
}

pub fn triplet_hinge(d_ap: f64, d_an: f64, margin: f64) -> f64 {
    (d_ap - d_an + margin).max(0.0)
}

/// Mean hinge over mined triples, with its gradient w.r.t. every embedding
/// row of the batch.
#[derive(Debug, Clone)]
pub struct TripletValue {
    pub value: f64,
    pub grad: Array2<f64>,
    /// Number of mined triples (the averaging denominator).
    pub triples: usize,
    /// Triples whose hinge is strictly positive, as (anchor, positive, negative).
    pub active: Vec<(usize, usize, usize)>,
}

impl TripletValue {
    /// True when no valid triple existed; value and gradient are zero.
    pub fn is_empty(&self) -> bool {
        self.triples == 0
    }
}

fn distance_matrix(emb: ArrayView2<f64>) -> Array2<f64> {
    let n = emb.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v = emb
                .row(i)
                .iter()
                .zip(emb.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Mines triples for `anchors`. Positives share the anchor's identity;
/// negatives are other identities accepted by `admits(anchor, candidate)`.
fn mine<F>(emb: ArrayView2<f64>, ids: &[IdentityId], anchors: &[usize], admits: F, cfg: &TripletConfig) -> TripletValue
where
    F: Fn(usize, usize) -> bool,
{
    let n = emb.nrows();
    let dist = distance_matrix(emb);
    let mut sum = 0.0;
    let mut triples = 0usize;
    let mut active = Vec::new();

    for &a in anchors {
        let positives: Vec<usize> = (0..n).filter(|&j| j != a && ids[j] == ids[a]).collect();
        let negatives: Vec<usize> = (0..n).filter(|&j| ids[j] != ids[a] && admits(a, j)).collect();
        if positives.is_empty() || negatives.is_empty() {
            continue;
        }
        match cfg.mining {
            Mining::AllValid => {
                for &p in &positives {
                    for &q in &negatives {
                        let h = triplet_hinge(dist[[a, p]], dist[[a, q]], cfg.margin);
                        triples += 1;
                        if h > 0.0 {
                            sum += h;
                            active.push((a, p, q));
                        }
                    }
                }
            }
            Mining::BatchHard => {
                // strict comparisons keep the smallest index on ties
                let mut p = positives[0];
                for &j in &positives[1..] {
                    if dist[[a, j]] > dist[[a, p]] {
                        p = j;
                    }
                }
                let mut q = negatives[0];
                for &j in &negatives[1..] {
                    if dist[[a, j]] < dist[[a, q]] {
                        q = j;
                    }
                }
                let h = triplet_hinge(dist[[a, p]], dist[[a, q]], cfg.margin);
                triples += 1;
                if h > 0.0 {
                    sum += h;
                    active.push((a, p, q));
                }
            }
        }
    }

    let mut grad = Array2::zeros(emb.raw_dim());
    if triples == 0 {
        return TripletValue {
            value: 0.0,
            grad,
            triples,
            active,
        };
    }
    let scale = 1.0 / triples as f64;
    for &(a, p, q) in &active {
        let (d_ap, d_an) = (dist[[a, p]], dist[[a, q]]);
        for k in 0..emb.ncols() {
            let u_ap = if d_ap > 0.0 {
                (emb[[a, k]] - emb[[p, k]]) / d_ap
            } else {
                0.0
            };
            let u_an = if d_an > 0.0 {
                (emb[[a, k]] - emb[[q, k]]) / d_an
            } else {
                0.0
            };
            grad[[a, k]] += scale * (u_ap - u_an);
            grad[[p, k]] -= scale * u_ap;
            grad[[q, k]] += scale * u_an;
        }
    }
    TripletValue {
        value: sum * scale,
        grad,
        triples,
        active,
    }
}

fn check_batch(emb: ArrayView2<f64>, ids: &[IdentityId]) -> Result<()> {
    if emb.nrows() != ids.len() {
        return Err(Error::invalid(format!(
            "{} embeddings but {} identities",
            emb.nrows(),
            ids.len()
        )));
    }
    Ok(())
}

/// Triplet loss over the whole batch, negatives drawn from any domain.
pub fn naive_triplet(emb: ArrayView2<f64>, ids: &[IdentityId], cfg: &TripletConfig) -> Result<TripletValue> {
    check_batch(emb, ids)?;
    let anchors: Vec<usize> = (0..ids.len()).collect();
    Ok(mine(emb, ids, &anchors, |_, _| true, cfg))
}

/// Triplet loss computed independently inside each domain of the batch.
pub fn separate_triplet(
    emb: ArrayView2<f64>,
    ids: &[IdentityId],
    cfg: &TripletConfig,
) -> Result<BTreeMap<DomainId, TripletValue>> {
    SeparateTriplet.per_domain(emb, ids, cfg)
}

pub trait TripletObjective: Send + Sync {
    fn name(&self) -> &'static str;

    /// May a sample from `candidate` serve as a negative for an anchor from `anchor`?
    fn admits_negative(&self, anchor: DomainId, candidate: DomainId) -> bool;

    /// One triplet term per domain present in the batch, grouping triples by
    /// the anchor's domain. Each term is averaged over its own triple count.
    fn per_domain(
        &self,
        emb: ArrayView2<f64>,
        ids: &[IdentityId],
        cfg: &TripletConfig,
    ) -> Result<BTreeMap<DomainId, TripletValue>> {
        check_batch(emb, ids)?;
        let mut anchors: BTreeMap<DomainId, Vec<usize>> = BTreeMap::new();
        for (i, id) in ids.iter().enumerate() {
            anchors.entry(id.domain).or_default().push(i);
        }
        Ok(anchors
            .into_iter()
            .map(|(d, list)| {
                let v = mine(
                    emb,
                    ids,
                    &list,
                    |a, j| self.admits_negative(ids[a].domain, ids[j].domain),
                    cfg,
                );
                (d, v)
            })
            .collect())
    }
}

/// Every other identity is a negative, whatever its domain.
pub struct NaiveTriplet;

impl TripletObjective for NaiveTriplet {
    fn name(&self) -> &'static str {
        "naive"
    }
    fn admits_negative(&self, _anchor: DomainId, _candidate: DomainId) -> bool {
        true
    }
}

/// Negatives restricted to the anchor's own domain.
pub struct SeparateTriplet;

impl TripletObjective for SeparateTriplet {
    fn name(&self) -> &'static str {
        "separate"
    }
    fn admits_negative(&self, anchor: DomainId, candidate: DomainId) -> bool {
        anchor == candidate
    }
}

pub fn objectives() -> Registry<dyn TripletObjective> {
    let mut r: Registry<dyn TripletObjective> = Registry::new("triplet objective");
    r.register("naive", Arc::new(NaiveTriplet));
    r.register("separate", Arc::new(SeparateTriplet));
    r
}

pub fn objective(name: &str) -> Result<Arc<dyn TripletObjective>> {
    objectives().get(name)
}

/// Mean over batch and parts of the softmax cross-entropy, and its gradient
/// w.r.t. the logits. `logits` is batch × parts × classes.
pub fn cross_entropy(logits: ArrayView3<f64>, labels: &[usize]) -> Result<(f64, Array3<f64>)> {
    let (b, p, c) = logits.dim();
    if labels.len() != b {
        return Err(Error::invalid(format!("{b} logit rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
    }
    if b == 0 || p == 0 {
        return Err(Error::invalid("cross-entropy needs a non-empty batch"));
    }
    let norm = 1.0 / (b * p) as f64;
    let mut grad = Array3::zeros((b, p, c));
    let mut total = 0.0;
    for i in 0..b {
        for j in 0..p {
            let row = logits.slice(ndarray::s![i, j, ..]);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[labels[i]];
            for k in 0..c {
                let soft = (row[k] - lse).exp();
                let onehot = if k == labels[i] { 1.0 } else { 0.0 };
                grad[[i, j, k]] = (soft - onehot) * norm;
            }
        }
    }
    Ok((total * norm, grad))
}

/// Inputs of the combined objective for one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossInput<'a> {
    pub embeddings: ArrayView2<'a, f64>,
    pub identities: &'a [IdentityId],
    /// batch × parts × classes
    pub part_logits: ArrayView3<'a, f64>,
    /// Global class index per sample.
    pub labels: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub per_domain_triplet: BTreeMap<DomainId, f64>,
    /// Domains of the batch that contributed no valid triple.
    pub empty_domains: Vec<DomainId>,
    pub cross_entropy: f64,
    pub total: f64,
    pub grad_embeddings: Array2<f64>,
    pub grad_logits: Array3<f64>,
    pub active_triples: Vec<(usize, usize, usize)>,
}

/// `Σ_k w_k · triplet_k + CE`, with gradients w.r.t. embeddings and logits.
pub fn combined_loss(
    input: LossInput<'_>,
    weights: &DomainWeights,
    cfg: &TripletConfig,
    objective: &dyn TripletObjective,
) -> Result<LossBreakdown> {
    let terms = objective.per_domain(input.embeddings, input.identities, cfg)?;
    let (ce, grad_logits) = cross_entropy(input.part_logits, input.labels)?;

    let mut grad_embeddings = Array2::zeros(input.embeddings.raw_dim());
    let mut per_domain_triplet = BTreeMap::new();
    let mut empty_domains = Vec::new();
    let mut active_triples = Vec::new();
    let mut weighted = 0.0;
    for (d, term) in terms {
        let w = weights
            .get(d)
            .ok_or_else(|| Error::invalid(format!("no triplet weight for domain {d}")))?;
        weighted += w * term.value;
        if w != 0.0 {
            grad_embeddings.scaled_add(w, &term.grad);
        }
        if term.is_empty() {
            empty_domains.push(d);
        }
        active_triples.extend(term.active);
        per_domain_triplet.insert(d, term.value);
    }
    Ok(LossBreakdown {
        per_domain_triplet,
        empty_domains,
        cross_entropy: ce,
        total: weighted + ce,
        grad_embeddings,
        grad_logits,
        active_triples,
    })
}
