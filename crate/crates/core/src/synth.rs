//! Synthetic multi-domain signature generator.
//!
//! Each domain draws identity centers, scatters samples around them, then
//! injects two kinds of corruption with ground-truth flags:
//!
//! * near-duplicates: the most isolated identities (largest mean distance from
//!   their center to the other centers) have their samples replaced by
//!   near-copies of one source sample, modelling repetitive sequences that sit
//!   far from every negative;
//! * outliers: randomly chosen samples are redrawn around their center with a
//!   much wider spread.
//!
//! Two optional knobs shape the data further. `nuisance_dims` pins identity
//! centers to the domain offset on a block of coordinates (placed by
//! `informative_start`), so those coordinates carry only dataset-specific
//! cues. `dup_isolation` pushes the identities chosen for duplication away
//! from the rest before their samples are drawn. Both default to no effect.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::types::{sq_dist, FeatureStore, Flag, IdentityId, PartLayout, Sample};

#[derive(Debug, Clone, PartialEq)]
pub struct DomainRecipe {
    pub n_identities: usize,
    pub samples_per_identity: usize,
    /// Std of identity centers.
    pub identity_spread: f64,
    /// Within-identity noise std.
    pub intra_std: f64,
    /// Additive domain offset; its length fixes the signature dimension.
    pub shift: Vec<f64>,
    /// Multiplicative domain gain applied to identity centers.
    pub scale: f64,
    pub dup_fraction: f64,
    pub outlier_fraction: f64,
    pub outlier_std: f64,
    /// Trailing coordinates that carry no identity information: identity
    /// centers sit at the domain shift there, so only the offset and noise
    /// vary. Models dataset-specific cues unrelated to identity.
    pub nuisance_dims: usize,
    /// First identity coordinate. The `dim - nuisance_dims` identity
    /// coordinates run from here, wrapping past the last coordinate; with 0
    /// the nuisance coordinates are the trailing ones.
    pub informative_start: usize,
    /// Factor applied to the offset (from the domain shift) of every identity
    /// chosen for duplication, before its samples are drawn. Values above 1
    /// make repetitive identities easy: far from every negative.
    pub dup_isolation: f64,
}

impl DomainRecipe {
    /// Clean recipe with no injected corruption.
    pub fn clean(n_identities: usize, samples_per_identity: usize, dim: usize) -> Self {
        Self {
            n_identities,
            samples_per_identity,
            identity_spread: 1.0,
            intra_std: 0.1,
            shift: vec![0.0; dim],
            scale: 1.0,
            dup_fraction: 0.0,
            outlier_fraction: 0.0,
            outlier_std: 1.0,
            nuisance_dims: 0,
            informative_start: 0,
            dup_isolation: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn n_samples(&self) -> usize {
        self.n_identities * self.samples_per_identity
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.n_identities == 0 || self.samples_per_identity == 0 {
            return Err(Error::invalid("recipe needs at least one identity and one sample"));
        }
        if self.shift.is_empty() {
            return Err(Error::invalid("recipe shift must have at least one component"));
        }
        if !(positive(self.identity_spread)
            && positive(self.intra_std)
            && positive(self.scale)
            && positive(self.outlier_std)
            && positive(self.dup_isolation))
        {
            return Err(Error::invalid("recipe spreads and scale must be positive"));
        }
        if self.nuisance_dims >= self.shift.len() {
            return Err(Error::invalid(
                "nuisance_dims must leave at least one identity coordinate",
            ));
        }
        if self.informative_start >= self.shift.len() {
            return Err(Error::invalid("informative_start must index a coordinate"));
        }
        if !unit(self.dup_fraction) || !unit(self.outlier_fraction) {
            return Err(Error::invalid("recipe fractions must lie in [0, 1]"));
        }
        if self.dup_fraction + self.outlier_fraction > 0.5 {
            return Err(Error::invalid("dup_fraction + outlier_fraction must not exceed 0.5"));
        }
        Ok(())
    }
}

/// `floor(fraction * n)`, tolerant of binary representation error
/// (`0.29 * 100` is `28.999…` in floating point).
pub fn fraction_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 + 1e-9).floor() as usize
}

/// Generates one store holding every recipe as its own domain, domain `k`
/// drawing from random stream `k` of `seed`. Sample ids run consecutively
/// from 0 in domain, identity, sample order.
pub fn generate(recipes: &[DomainRecipe], seed: u64) -> Result<FeatureStore> {
    let first = recipes
        .first()
        .ok_or_else(|| Error::invalid("at least one recipe is required"))?;
    let dim = first.dim();
    for (k, r) in recipes.iter().enumerate() {
        r.validate()?;
        if r.dim() != dim {
            return Err(Error::invalid(format!(
                "recipe {k} has dimension {}, recipe 0 has {dim}",
                r.dim()
            )));
        }
    }

    let mut samples = Vec::new();
    let mut next_id = 0u64;
    for (k, recipe) in recipes.iter().enumerate() {
        let mut rng = Rng::stream(seed, k as u64);
        let domain = generate_domain(recipe, k as u32, &mut rng)?;
        for (label, signature, flag) in domain {
            samples.push(Sample {
                id: next_id,
                identity: IdentityId::new(k as u32, label),
                signature,
                flag,
            });
            next_id += 1;
        }
    }
    FeatureStore::new(dim, samples)
}

type Row = (u32, Vec<f64>, Option<Flag>);

fn generate_domain(r: &DomainRecipe, domain: u32, rng: &mut Rng) -> Result<Vec<Row>> {
    let dim = r.dim();
    let spi = r.samples_per_identity;
    let identity_dims = dim - r.nuisance_dims;
    let centers: Vec<Vec<f64>> = (0..r.n_identities)
        .map(|_| {
            (0..dim)
                .map(|d| {
                    // drawn for every coordinate so streams do not depend on nuisance_dims
                    let z = rng.normal(0.0, r.identity_spread) * r.scale;
                    if (d + dim - r.informative_start) % dim < identity_dims {
                        z + r.shift[d]
                    } else {
                        r.shift[d]
                    }
                })
                .collect()
        })
        .collect();

    let n = r.n_samples();
    let n_dup = fraction_count(r.dup_fraction, n);
    let n_out = fraction_count(r.outlier_fraction, n);
    let mut centers = centers;
    let mut isolation: Vec<usize> = Vec::new();
    if n_dup > 0 {
        if spi < 2 {
            return Err(Error::invalid(format!(
                "domain {domain}: duplicates need at least 2 samples per identity"
            )));
        }
        let mut ranked: Vec<(usize, f64)> = (0..centers.len())
            .map(|i| {
                let total: f64 = (0..centers.len())
                    .filter(|&j| j != i)
                    .map(|j| sq_dist(&centers[i], &centers[j]).sqrt())
                    .sum();
                (i, total / (centers.len().max(2) - 1) as f64)
            })
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        isolation = ranked.into_iter().map(|(i, _)| i).collect();
        let used = n_dup.div_ceil(spi - 1).min(centers.len());
        for &ident in &isolation[..used] {
            for (c, s) in centers[ident].iter_mut().zip(&r.shift) {
                *c = s + r.dup_isolation * (*c - s);
            }
        }
    }

    let mut rows: Vec<Row> = Vec::with_capacity(n);
    for (label, c) in centers.iter().enumerate() {
        for _ in 0..spi {
            let sig = c.iter().map(|&m| rng.normal(m, r.intra_std)).collect();
            rows.push((label as u32, sig, None));
        }
    }

    let mut is_source = vec![false; n];
    if n_dup > 0 {
        let copy_std = r.intra_std / 100.0;
        let mut placed = 0;
        'outer: for &ident in &isolation {
            let base = ident * spi;
            is_source[base] = true;
            let source = rows[base].1.clone();
            for slot in base + 1..base + spi {
                if placed == n_dup {
                    break 'outer;
                }
                rows[slot].1 = source.iter().map(|&v| rng.normal(v, copy_std)).collect();
                rows[slot].2 = Some(Flag::Duplicate);
                placed += 1;
            }
        }
    }

    if n_out > 0 {
        let mut candidates: Vec<usize> = (0..n).filter(|&i| rows[i].2.is_none() && !is_source[i]).collect();
        rng.shuffle(&mut candidates);
        let mut clean_left = vec![0usize; centers.len()];
        for row in &rows {
            if row.2.is_none() {
                clean_left[row.0 as usize] += 1;
            }
        }
        let mut placed = 0;
        for i in candidates {
            if placed == n_out {
                break;
            }
            let label = rows[i].0 as usize;
            if clean_left[label] < 2 {
                continue;
            }
            clean_left[label] -= 1;
            rows[i].1 = centers[label].iter().map(|&m| rng.normal(m, r.outlier_std)).collect();
            rows[i].2 = Some(Flag::Outlier);
            placed += 1;
        }
        if placed < n_out {
            return Err(Error::invalid(format!(
                "domain {domain}: only {placed} of {n_out} outliers fit without emptying an identity"
            )));
        }
    }
    Ok(rows)
}

/// Attaches a `p`-way contiguous segmentation of the signature to the store.
pub fn make_part_labels(store: &FeatureStore, p: usize) -> Result<FeatureStore> {
    let layout = PartLayout::new(store.dim(), p)?;
    let mut out = store.clone();
    out.set_part_layout(layout);
    Ok(out)
}
