//! Training loop, gallery/probe evaluation and comparative experiment runners.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::distill::{self, DistillPolicy, DistillReport, SampleScores};
use crate::error::{Error, Result};
use crate::formats::{self, real};
use crate::losses::{self, combined_loss, DomainWeights, LossInput, Mining, TripletConfig};
use crate::net::{signature_matrix, Hyper, InferenceNorm, ModelState, NormMode, Pass};
use crate::rng::Rng;
use crate::sampler::{sample_batch, BatchSpec, LrSchedule};
use crate::types::{sq_dist, DomainId, FeatureStore, IdentityId, Sample};

/// Architecture choices; the input width comes from the data.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub hidden: usize,
    pub d_emb: usize,
    pub parts: usize,
    pub norm: NormMode,
    pub eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let h = Hyper::new(1);
        Self {
            hidden: h.hidden,
            d_emb: h.d_emb,
            parts: h.parts,
            norm: h.norm,
            eps: h.eps,
            bn_momentum: h.bn_momentum,
        }
    }
}

impl ModelSpec {
    pub fn hyper(&self, d_in: usize) -> Hyper {
        Hyper {
            d_in,
            hidden: self.hidden,
            d_emb: self.d_emb,
            parts: self.parts,
            norm: self.norm,
            eps: self.eps,
            bn_momentum: self.bn_momentum,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub batch: BatchSpec,
    pub triplet: TripletConfig,
    /// Registered triplet objective name (`separate` or `naive`).
    pub objective: String,
    pub weights: DomainWeights,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Evaluate every this many steps (0: only after the last step).
    pub eval_every: usize,
    pub gallery_per_identity: usize,
}

impl TrainConfig {
    /// Defaults: batches of 8 identities × 4 samples per domain, unit
    /// weights, 2000 steps decaying at 1000 and 1500.
    pub fn default_for(domains: &[DomainId]) -> Result<Self> {
        Ok(Self {
            model: ModelSpec::default(),
            batch: BatchSpec::uniform(domains, 8, 4)?,
            triplet: TripletConfig::default(),
            objective: "separate".into(),
            weights: DomainWeights::uniform(domains, 1.0),
            schedule: LrSchedule::new(0.1, vec![1000, 1500], 0.1, 2000)?,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            eval_every: 0,
            gallery_per_identity: 2,
        })
    }

    pub fn train_domains(&self) -> Vec<DomainId> {
        self.batch.domains()
    }

    /// Canonical `key = value` rendering; loadable as a config file.
    pub fn to_config_text(&self) -> String {
        let m = &self.model;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("model.hidden", m.hidden.to_string());
        kv("model.embedding", m.d_emb.to_string());
        kv("model.parts", m.parts.to_string());
        kv("model.norm", m.norm.to_string());
        kv("model.eps", real(m.eps));
        kv("model.bn_momentum", real(m.bn_momentum));
        let domains = self.train_domains();
        kv(
            "train.domains",
            domains.iter().map(|d| d.0.to_string()).collect::<Vec<_>>().join(","),
        );
        kv("train.steps", self.schedule.total_steps.to_string());
        kv("train.lr", real(self.schedule.initial));
        kv(
            "train.decay_steps",
            self.schedule
                .decay_steps
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("train.decay_factor", real(self.schedule.decay_factor));
        kv("train.momentum", real(self.momentum));
        kv("train.weight_decay", real(self.weight_decay));
        kv("train.margin", real(self.triplet.margin));
        kv("train.mining", self.triplet.mining.to_string());
        kv("train.objective", self.objective.clone());
        kv("train.eval_every", self.eval_every.to_string());
        for (d, (p, k)) in self.batch.iter() {
            kv(&format!("train.domain{}.p", d.0), p.to_string());
            kv(&format!("train.domain{}.k", d.0), k.to_string());
        }
        for (d, w) in self.weights.iter() {
            kv(&format!("train.domain{}.weight", d.0), real(w));
        }
        kv("eval.gallery_per_identity", self.gallery_per_identity.to_string());
        out
    }

    /// Digest of the canonical rendering plus the seed.
    pub fn digest(&self) -> String {
        formats::text_digest(&format!("{}seed = {}\n", self.to_config_text(), self.seed))
    }

    /// Copy training on `domain` alone, keeping its P×K and weight.
    pub fn restricted_to(&self, domain: DomainId) -> Result<Self> {
        let pk = self
            .batch
            .get(domain)
            .or_else(|| self.batch.iter().next().map(|(_, pk)| pk))
            .expect("batch spec is never empty");
        let mut c = self.clone();
        c.batch = BatchSpec::new([(domain, pk)].into())?;
        c.weights = DomainWeights::uniform(&[domain], self.weights.get(domain).unwrap_or(1.0));
        Ok(c)
    }

    pub fn validate(&self, store: &FeatureStore) -> Result<()> {
        self.model.hyper(store.dim()).validate()?;
        self.schedule.validate()?;
        losses::objective(&self.objective)?;
        if !(self.triplet.margin.is_finite() && self.triplet.margin > 0.0) {
            return Err(Error::invalid("triplet margin must be positive"));
        }
        if !self.weights.has_positive() && self.weights.iter().next().is_some() {
            // all-zero weights are allowed (pure cross-entropy) but not negative ones
        }
        let present: BTreeSet<DomainId> = store.domains().into_iter().collect();
        for d in self.train_domains() {
            if !present.contains(&d) {
                return Err(Error::invalid(format!("training domain {d} is absent from the data")));
            }
            if self.weights.get(d).is_none() {
                return Err(Error::invalid(format!("no triplet weight for training domain {d}")));
            }
        }
        if self.gallery_per_identity == 0 {
            return Err(Error::invalid("gallery_per_identity must be positive"));
        }
        Ok(())
    }
}

impl LrSchedule {
    /// Same shape stretched to `total` steps.
    pub fn rescaled(&self, total: usize) -> Self {
        let f = total as f64 / self.total_steps as f64;
        let mut decay: Vec<usize> = self
            .decay_steps
            .iter()
            .map(|&s| ((s as f64 * f).round() as usize).clamp(1, total.saturating_sub(1).max(1)))
            .collect();
        decay.dedup();
        decay.retain(|&s| s < total);
        Self {
            initial: self.initial,
            decay_steps: decay,
            decay_factor: self.decay_factor,
            total_steps: total.max(1),
        }
    }
}

/// Gallery/probe split of one domain and the inference norm to embed it with.
#[derive(Debug, Clone)]
pub struct EvalProtocol {
    pub gallery: FeatureStore,
    pub probe: FeatureStore,
    pub inference: InferenceNorm,
}

impl EvalProtocol {
    /// First `gallery_per_identity` samples (ascending id) of each identity in
    /// `domain` form the gallery; the rest are probes.
    pub fn split(
        store: &FeatureStore,
        domain: DomainId,
        gallery_per_identity: usize,
        inference: InferenceNorm,
    ) -> Result<Self> {
        let mut gallery_ids = BTreeSet::new();
        for id in store.identities_in(domain) {
            let members = store.identity_indices(id).unwrap();
            for &i in members.iter().take(gallery_per_identity) {
                gallery_ids.insert(store.sample(i).id);
            }
        }
        let gallery = store.filter(|s| gallery_ids.contains(&s.id));
        let probe = store.filter(|s| s.domain() == domain && !gallery_ids.contains(&s.id));
        Ok(Self {
            gallery,
            probe,
            inference,
        })
    }
}

/// Fraction of probes whose nearest gallery embedding shares their identity.
/// Distance ties go to the gallery sample with the smallest id.
pub fn rank1_embeddings(
    gallery: &[(u64, IdentityId)],
    gallery_emb: ArrayView2<f64>,
    probes: &[IdentityId],
    probe_emb: ArrayView2<f64>,
) -> Result<f64> {
    if gallery.is_empty() || probes.is_empty() {
        return Err(Error::invalid("rank-1 needs a non-empty gallery and probe set"));
    }
    if gallery.len() != gallery_emb.nrows() || probes.len() != probe_emb.nrows() {
        return Err(Error::invalid("labels and embeddings disagree in length"));
    }
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by_key(|&i| gallery[i].0);
    let mut hits = 0usize;
    for (p, want) in probes.iter().enumerate() {
        let pe = probe_emb.row(p);
        let pe = pe.as_slice().expect("standard layout");
        let mut best = order[0];
        let mut best_d = f64::INFINITY;
        for &g in &order {
            let d = sq_dist(pe, gallery_emb.row(g).as_slice().expect("standard layout"));
            if d < best_d {
                best_d = d;
                best = g;
            }
        }
        if gallery[best].1 == *want {
            hits += 1;
        }
    }
    Ok(hits as f64 / probes.len() as f64)
}

pub fn rank1(model: &ModelState, protocol: &EvalProtocol) -> Result<f64> {
    let g: Vec<&Sample> = protocol.gallery.samples().iter().collect();
    let p: Vec<&Sample> = protocol.probe.samples().iter().collect();
    if g.is_empty() || p.is_empty() {
        return Err(Error::invalid("rank-1 needs a non-empty gallery and probe set"));
    }
    let (ge, _) = model.embed_samples(&g, Some(protocol.inference))?;
    let (pe, _) = model.embed_samples(&p, Some(protocol.inference))?;
    let gl: Vec<(u64, IdentityId)> = g.iter().map(|s| (s.id, s.identity)).collect();
    let pl: Vec<IdentityId> = p.iter().map(|s| s.identity).collect();
    rank1_embeddings(&gl, ge.view(), &pl, pe.view())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub domain: DomainId,
    /// Whether the model trained on this domain.
    pub seen: bool,
    pub inference: InferenceNorm,
    pub rank1: f64,
    pub probes: usize,
}

/// Rank-1 for every domain of `store`. Seen domains are scored with their own
/// branch and, under DSBN, also with output averaging; unseen domains use
/// output averaging.
pub fn evaluate(
    model: &ModelState,
    store: &FeatureStore,
    gallery_per_identity: usize,
    step: usize,
) -> Result<Vec<EvalRecord>> {
    let trained: BTreeSet<DomainId> = model.training_domains().into_iter().collect();
    let mut out = Vec::new();
    for d in store.domains() {
        let seen = trained.contains(&d);
        let norms = match (model.norm.mode, seen) {
            (NormMode::Single, _) => vec![InferenceNorm::Branch(d)],
            (NormMode::Dsbn, true) => vec![InferenceNorm::Branch(d), InferenceNorm::Average],
            (NormMode::Dsbn, false) => vec![InferenceNorm::Average],
        };
        for inference in norms {
            let proto = EvalProtocol::split(store, d, gallery_per_identity, inference)?;
            if proto.probe.is_empty() {
                continue;
            }
            out.push(EvalRecord {
                step,
                domain: d,
                seen,
                inference,
                rank1: rank1(model, &proto)?,
                probes: proto.probe.len(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub cross_entropy: f64,
    pub per_domain: BTreeMap<DomainId, f64>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub evals: Vec<EvalRecord>,
    pub losses: Vec<LossRecord>,
    pub config_digest: String,
    pub seed: u64,
    pub steps: usize,
    /// Not written to any file: outputs must not depend on the clock.
    pub wall_time: Duration,
}

impl RunReport {
    /// Final-step rank-1 under the default inference of each domain.
    pub fn final_rank1(&self, domain: DomainId) -> Option<f64> {
        self.evals
            .iter()
            .rev()
            .find(|e| e.domain == domain && (!e.seen || matches!(e.inference, InferenceNorm::Branch(_))))
            .map(|e| e.rank1)
    }

    pub fn eval_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", formats::REPORT_VERSION);
        let _ = writeln!(out, "#config_digest={}", self.config_digest);
        let _ = writeln!(out, "#seed={}", self.seed);
        let _ = writeln!(out, "#steps={}", self.steps);
        let _ = writeln!(out, "step,domain,seen,inference,rank1,probes");
        for e in &self.evals {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                e.step,
                e.domain.0,
                e.seen as u8,
                e.inference,
                real(e.rank1),
                e.probes
            );
        }
        out
    }

    pub fn loss_csv(&self) -> String {
        let domains: BTreeSet<DomainId> = self.losses.iter().flat_map(|l| l.per_domain.keys().copied()).collect();
        let mut out = String::new();
        let _ = writeln!(out, "{}", formats::LOSS_VERSION);
        let _ = writeln!(out, "#config_digest={}", self.config_digest);
        out.push_str("step,lr,total,cross_entropy");
        for d in &domains {
            let _ = write!(out, ",triplet_d{}", d.0);
        }
        out.push('\n');
        for l in &self.losses {
            let _ = write!(
                out,
                "{},{},{},{}",
                l.step,
                real(l.lr),
                real(l.total),
                real(l.cross_entropy)
            );
            for d in &domains {
                out.push(',');
                out.push_str(&l.per_domain.get(d).map_or_else(|| "-".into(), |&v| real(v)));
            }
            out.push('\n');
        }
        out
    }

    /// Human-readable summary of the last evaluation point.
    pub fn summary(&self) -> String {
        let mut out = format!(
            "trained {} steps (seed {}) in {:.2?}\n",
            self.steps, self.seed, self.wall_time
        );
        if let Some(l) = self.losses.last() {
            let _ = writeln!(out, "final loss {:.6} (ce {:.6})", l.total, l.cross_entropy);
        }
        for e in self.evals.iter().filter(|e| e.step == self.steps) {
            let _ = writeln!(
                out,
                "domain {} {:<6} {:<9} rank-1 {:.4} ({} probes)",
                e.domain,
                if e.seen { "seen" } else { "unseen" },
                e.inference.to_string(),
                e.rank1,
                e.probes
            );
        }
        out
    }
}

fn class_counts(store: &FeatureStore, domains: &[DomainId]) -> BTreeMap<DomainId, usize> {
    domains
        .iter()
        .map(|&d| {
            let n = store
                .identities_in(d)
                .iter()
                .map(|i| i.label as usize + 1)
                .max()
                .unwrap_or(0);
            (d, n)
        })
        .collect()
}

/// Trains a fresh model on the training domains of `cfg`, evaluating on every
/// domain of `store` at each evaluation point and after the last step.
pub fn train(store: &FeatureStore, cfg: &TrainConfig) -> Result<(ModelState, RunReport)> {
    cfg.validate(store)?;
    let started = Instant::now();
    let domains = cfg.train_domains();
    let mut model = ModelState::init(
        cfg.model.hyper(store.dim()),
        &class_counts(store, &domains),
        &mut Rng::stream(cfg.seed, 1),
    )?;
    let mut batch_rng = Rng::stream(cfg.seed, 2);
    let objective = losses::objective(&cfg.objective)?;
    let mut velocity = model.params.zeros_like();
    let steps = cfg.schedule.total_steps;
    let mut report = RunReport {
        evals: Vec::new(),
        losses: Vec::with_capacity(steps),
        config_digest: cfg.digest(),
        seed: cfg.seed,
        steps,
        wall_time: Duration::ZERO,
    };

    for step in 0..steps {
        let lr = cfg.schedule.lr_at(step)?;
        let idx = sample_batch(store, &cfg.batch, &mut batch_rng)?;
        let batch: Vec<&Sample> = idx.iter().map(|&i| store.sample(i)).collect();
        let x = signature_matrix(&batch);
        let doms: Vec<DomainId> = batch.iter().map(|s| s.domain()).collect();
        let ids: Vec<IdentityId> = batch.iter().map(|s| s.identity).collect();
        let labels: Vec<usize> = ids
            .iter()
            .map(|&i| model.class_of(i).expect("training identity has a class"))
            .collect();

        let out = model.forward(x.view(), &doms, Pass::Train)?;
        let loss = combined_loss(
            LossInput {
                embeddings: out.embeddings.view(),
                identities: &ids,
                part_logits: out.part_logits.view(),
                labels: &labels,
            },
            &cfg.weights,
            &cfg.triplet,
            objective.as_ref(),
        )?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!(
                    "loss {} (ce {}, triplet {:?})",
                    loss.total, loss.cross_entropy, loss.per_domain_triplet
                ),
            });
        }
        let grads = model.backward(&out.cache, &loss.grad_embeddings, &loss.grad_logits)?;
        model.sgd_step(&mut velocity, &grads, lr, cfg.momentum, cfg.weight_decay);
        if !model.params.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: "non-finite parameters after update".into(),
            });
        }
        report.losses.push(LossRecord {
            step,
            lr,
            total: loss.total,
            cross_entropy: loss.cross_entropy,
            per_domain: loss.per_domain_triplet,
        });
        let done = step + 1;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 && done != steps {
            report
                .evals
                .extend(evaluate(&model, store, cfg.gallery_per_identity, done)?);
        }
    }
    report
        .evals
        .extend(evaluate(&model, store, cfg.gallery_per_identity, steps)?);
    report.wall_time = started.elapsed();
    Ok((model, report))
}

/// Per-domain pruning instructions.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunePlan {
    pub fraction: f64,
    /// Removal strategy per domain; domains not listed are kept whole.
    pub modes: BTreeMap<DomainId, String>,
    /// Length of the per-domain scoring model's training run.
    pub pretrain_steps: usize,
}

/// Prunes the planned domains of `store`. Each domain is scored by a model
/// trained on that domain alone (random removal needs no model).
pub fn prune_store(
    store: &FeatureStore,
    plan: &PrunePlan,
    base: &TrainConfig,
    seed: u64,
) -> Result<(FeatureStore, Vec<DistillReport>)> {
    let mut removed = BTreeSet::new();
    let mut reports = Vec::new();
    for (&d, mode) in &plan.modes {
        let policy = DistillPolicy::new(mode, plan.fraction)?.with_seed(Rng::stream(seed, 300 + d.0 as u64).next_u64());
        let sub = store.domain_subset(&[d]);
        if sub.is_empty() {
            return Err(Error::invalid(format!("cannot prune domain {d}: no samples")));
        }
        let report = if mode == "random" {
            let scores = sub
                .samples()
                .iter()
                .map(|s| SampleScores {
                    sample_id: s.id,
                    mean_dist: None,
                    intra_dist: 0.0,
                    failure: false,
                })
                .collect();
            distill::select(&sub, scores, &policy)?
        } else {
            let model = pretrain(store, d, base, plan.pretrain_steps, seed)?;
            distill::distill(&sub, &model, &policy)?
        };
        removed.extend(report.removed_ids.iter().copied());
        reports.push(report);
    }
    Ok((store.filter(|s| !removed.contains(&s.id)), reports))
}

/// Model trained on `domain` alone with a single BN, used to score it.
pub fn pretrain(
    store: &FeatureStore,
    domain: DomainId,
    base: &TrainConfig,
    steps: usize,
    seed: u64,
) -> Result<ModelState> {
    let mut cfg = base.restricted_to(domain)?;
    cfg.model.norm = NormMode::Single;
    cfg.schedule = base.schedule.rescaled(steps);
    cfg.eval_every = 0;
    cfg.seed = Rng::stream(seed, 200 + domain.0 as u64).next_u64();
    let sub = store.domain_subset(&[domain]);
    let (model, _) = train(&sub, &cfg)?;
    Ok(model)
}

/// One row of an experiment grid: overrides applied to the base config.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub norm: Option<NormMode>,
    pub objective: Option<String>,
    pub prune: Option<PrunePlan>,
}

impl Variant {
    pub fn named(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            norm: None,
            objective: None,
            prune: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub variant: String,
    pub seed: u64,
    pub outcome: std::result::Result<CellScores, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellScores {
    /// Mean rank-1 over seen domains (own-branch inference).
    pub self_rank1: f64,
    /// Mean rank-1 over unseen domains, if any.
    pub cross_rank1: Option<f64>,
    pub train_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub variant: String,
    pub runs: usize,
    pub failures: usize,
    pub self_mean: f64,
    pub self_std: f64,
    pub cross_mean: Option<f64>,
    pub cross_std: Option<f64>,
    pub train_samples: f64,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub cells: Vec<CellResult>,
    pub digest: String,
}

/// (mean, sample std); std is 0 for fewer than two values.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn run_cell(variant: &Variant, store: &FeatureStore, base: &TrainConfig, seed: u64) -> Result<CellScores> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    if let Some(n) = variant.norm {
        cfg.model.norm = n;
    }
    if let Some(o) = &variant.objective {
        cfg.objective = o.clone();
    }
    let data = match &variant.prune {
        Some(plan) => prune_store(store, plan, &cfg, seed)?.0,
        None => store.clone(),
    };
    let (_, report) = train(&data, &cfg)?;
    let trained: BTreeSet<DomainId> = cfg.train_domains().into_iter().collect();
    let (mut own, mut cross) = (Vec::new(), Vec::new());
    for d in store.domains() {
        if let Some(r) = report.final_rank1(d) {
            if trained.contains(&d) {
                own.push(r);
            } else {
                cross.push(r);
            }
        }
    }
    let train_samples = data.samples().iter().filter(|s| trained.contains(&s.domain())).count();
    Ok(CellScores {
        self_rank1: if own.is_empty() { f64::NAN } else { mean_std(&own).0 },
        cross_rank1: (!cross.is_empty()).then(|| mean_std(&cross).0),
        train_samples,
    })
}

/// Trains every variant under every seed and tabulates mean ± std of self- and
/// cross-domain rank-1. Cells run in parallel; a failing cell is recorded and
/// the others continue.
pub fn run_comparison(
    variants: &[Variant],
    store: &FeatureStore,
    base: &TrainConfig,
    seeds: &[u64],
) -> Result<Comparison> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("comparison needs at least one variant and one seed"));
    }
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let cells: Vec<CellResult> = jobs
        .par_iter()
        .map(|&(v, seed)| CellResult {
            variant: variants[v].name.clone(),
            seed,
            outcome: run_cell(&variants[v], store, base, seed).map_err(|e| e.to_string()),
        })
        .collect();

    let rows = variants
        .iter()
        .map(|v| {
            let ok: Vec<&CellScores> = cells
                .iter()
                .filter(|c| c.variant == v.name)
                .filter_map(|c| c.outcome.as_ref().ok())
                .collect();
            let failures = seeds.len() - ok.len();
            let own: Vec<f64> = ok.iter().map(|c| c.self_rank1).collect();
            let cross: Vec<f64> = ok.iter().filter_map(|c| c.cross_rank1).collect();
            let (self_mean, self_std) = if own.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                mean_std(&own)
            };
            let (cross_mean, cross_std) = if cross.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&cross);
                (Some(m), Some(s))
            };
            ComparisonRow {
                variant: v.name.clone(),
                runs: ok.len(),
                failures,
                self_mean,
                self_std,
                cross_mean,
                cross_std,
                train_samples: ok.iter().map(|c| c.train_samples as f64).sum::<f64>() / ok.len().max(1) as f64,
            }
        })
        .collect();
    let mut key = base.to_config_text();
    let _ = writeln!(key, "seeds = {seeds:?}");
    for v in variants {
        let _ = writeln!(key, "variant = {v:?}");
    }
    Ok(Comparison {
        rows,
        cells,
        digest: formats::text_digest(&key),
    })
}

impl Comparison {
    pub fn row(&self, variant: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".into(), real);
        let mut out = String::new();
        let _ = writeln!(out, "{}", formats::COMPARE_VERSION);
        let _ = writeln!(out, "#digest={}", self.digest);
        let _ = writeln!(
            out,
            "variant,runs,failures,self_mean,self_std,cross_mean,cross_std,train_samples"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.variant,
                r.runs,
                r.failures,
                real(r.self_mean),
                real(r.self_std),
                opt(r.cross_mean),
                opt(r.cross_std),
                real(r.train_samples)
            );
        }
        let _ = writeln!(out, "#cells");
        let _ = writeln!(out, "#variant,seed,self_rank1,cross_rank1,train_samples,error");
        for c in &self.cells {
            match &c.outcome {
                Ok(s) => {
                    let _ = writeln!(
                        out,
                        "#{},{},{},{},{},-",
                        c.variant,
                        c.seed,
                        real(s.self_rank1),
                        opt(s.cross_rank1),
                        s.train_samples
                    );
                }
                Err(e) => {
                    let _ = writeln!(out, "#{},{},-,-,-,{}", c.variant, c.seed, e.replace(',', ";"));
                }
            }
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<28} {:>5} {:>17} {:>17} {:>9}",
            "variant", "runs", "self rank-1", "cross rank-1", "samples"
        );
        for r in &self.rows {
            let cross = match (r.cross_mean, r.cross_std) {
                (Some(m), Some(s)) => format!("{m:.4} ± {s:.4}"),
                _ => "-".into(),
            };
            let _ = writeln!(
                out,
                "{:<28} {:>5} {:>17} {:>17} {:>9.1}",
                r.variant,
                r.runs,
                format!("{:.4} ± {:.4}", r.self_mean, r.self_std),
                cross,
                r.train_samples
            );
        }
        out
    }
}

/// Rank-1 of a model trained on domain `i` alone, evaluated on domain `j`,
/// for every ordered pair of `domains`.
pub fn transfer_matrix(store: &FeatureStore, base: &TrainConfig, domains: &[DomainId]) -> Result<Array2<f64>> {
    let rows: Vec<Result<Vec<f64>>> = domains
        .par_iter()
        .map(|&d| {
            let mut cfg = base.restricted_to(d)?;
            cfg.eval_every = 0;
            cfg.seed = Rng::stream(base.seed, 400 + d.0 as u64).next_u64();
            let (model, _) = train(&store.domain_subset(&[d]), &cfg)?;
            domains
                .iter()
                .map(|&t| {
                    let proto = EvalProtocol::split(store, t, base.gallery_per_identity, model.default_inference(t))?;
                    rank1(&model, &proto)
                })
                .collect()
        })
        .collect();
    let n = domains.len();
    let mut m = Array2::zeros((n, n));
    for (i, r) in rows.into_iter().enumerate() {
        for (j, v) in r?.into_iter().enumerate() {
            m[[i, j]] = v;
        }
    }
    Ok(m)
}

/// All-valid mining copy of a config, used by oracle-style checks.
pub fn with_mining(cfg: &TrainConfig, mining: Mining) -> TrainConfig {
    let mut c = cfg.clone();
    c.triplet.mining = mining;
    c
}
