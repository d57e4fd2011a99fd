//! End-to-end experiments on synthetic data. Each returns its raw per-seed
//! measurements; pass/fail thresholds live with the callers.

use std::collections::BTreeSet;

use gaitmix::affinity::{affinity_accuracy_correlation, high_level_affinity, low_level_affinity};
use gaitmix::distill::{distill, DistillPolicy};
use gaitmix::net::{bn_forward_infer, signature_matrix, NormMode};
use gaitmix::sampler::{BatchSpec, LrSchedule};
use gaitmix::synth::{generate, DomainRecipe};
use gaitmix::trainer::{pretrain, run_comparison, train, transfer_matrix, Comparison, PrunePlan, TrainConfig, Variant};
use gaitmix::types::Flag;
use gaitmix::{DomainId, FeatureStore, Sample};
use ndarray::Axis;

pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Default training protocol: P=8 identities × K=4 samples per domain,
/// 2000 steps, learning rate 0.1 decayed ×0.1 at steps 1000 and 1500.
pub fn base_config(domains: &[DomainId], d_emb: usize, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::default_for(domains).unwrap();
    c.model.d_emb = d_emb;
    c.batch = BatchSpec::uniform(domains, 8, 4).unwrap();
    c.schedule = LrSchedule::new(0.1, vec![1000, 1500], 0.1, 2000).unwrap();
    c.seed = seed;
    c
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ------------------------------------------------------------ triplet direction

/// Three domains whose identities live in 3 shared coordinates and whose
/// offsets sit on 3 identity-free nuisance coordinates (one per domain).
/// Dense identity space makes cross-domain look-alikes common.
pub fn crowded_domains(seed: u64) -> FeatureStore {
    let recipes: Vec<DomainRecipe> = (0..3)
        .map(|k| {
            let mut r = DomainRecipe::clean(40, 8, 6);
            r.intra_std = 0.3;
            r.nuisance_dims = 3;
            r.shift[3 + k] = 0.3;
            r
        })
        .collect();
    generate(&recipes, 100 + seed).unwrap()
}

#[derive(Debug, Clone)]
pub struct Direction {
    pub naive: Vec<f64>,
    pub separate: Vec<f64>,
}

/// Held-out-domain rank-1 after training on domains 0 and 1 with each objective.
pub fn separate_vs_naive(seeds: &[u64]) -> Direction {
    let mut out = Direction {
        naive: vec![],
        separate: vec![],
    };
    for &seed in seeds {
        let store = crowded_domains(seed);
        for obj in ["naive", "separate"] {
            let mut cfg = base_config(&[DomainId(0), DomainId(1)], 8, seed);
            cfg.objective = obj.into();
            let (_, report) = train(&store, &cfg).unwrap();
            let r = report.final_rank1(DomainId(2)).unwrap();
            if obj == "naive" {
                out.naive.push(r);
            } else {
                out.separate.push(r);
            }
        }
    }
    out
}

// ------------------------------------------------------------ DSBN statistics

#[derive(Debug, Clone)]
pub struct BranchStats {
    pub seed: u64,
    /// ‖running mean − empirical mean‖ / ‖empirical mean‖ per branch.
    pub mean_rel_err: Vec<(DomainId, f64)>,
    /// max |average-inference output − mean of per-branch outputs|.
    pub average_abs_err: f64,
    pub shift_gap_in_intra_std: f64,
}

pub fn dsbn_domains(seed: u64) -> FeatureStore {
    let mut a = DomainRecipe::clean(20, 10, 16);
    a.intra_std = 0.2;
    a.shift = vec![0.5; 16];
    let mut b = a.clone();
    // offset difference 0.5·√16 = 2.0 = 10 intra_std
    b.shift = vec![1.0; 16];
    generate(&[a, b], 200 + seed).unwrap()
}

pub fn dsbn_statistics(seed: u64) -> BranchStats {
    let store = dsbn_domains(seed);
    let domains = store.domains();
    let mut cfg = base_config(&domains, 16, seed);
    cfg.model.norm = NormMode::Dsbn;
    // every identity in every batch: batch means then differ from the domain
    // mean only through within-identity sampling
    cfg.batch = BatchSpec::uniform(&domains, 20, 4).unwrap();
    let (model, _) = train(&store, &cfg).unwrap();

    let mut mean_rel_err = Vec::new();
    for &d in &domains {
        let rows: Vec<&Sample> = store.samples().iter().filter(|s| s.domain() == d).collect();
        let z = model.linear1(signature_matrix(&rows).view()).unwrap();
        let empirical = z.mean_axis(Axis(0)).unwrap();
        let k = model.norm.branch_of(d).unwrap();
        let running = &model.norm.stats[k].mean;
        let num = (running - &empirical).mapv(|v| v * v).sum().sqrt();
        let den = empirical.mapv(|v| v * v).sum().sqrt();
        mean_rel_err.push((d, num / den));
    }

    let all: Vec<&Sample> = store.samples().iter().collect();
    let z = model.linear1(signature_matrix(&all).view()).unwrap();
    let avg = model.dsbn_average_inference(z.view());
    let n = model.norm.stats.len();
    let mut manual = ndarray::Array2::<f64>::zeros(z.dim());
    for k in 0..n {
        manual += &bn_forward_infer(
            z.view(),
            model.params.gamma[k].view(),
            model.params.beta[k].view(),
            &model.norm.stats[k],
            model.norm.eps,
        );
    }
    manual /= n as f64;
    let average_abs_err = (&avg - &manual).iter().fold(0.0f64, |m, v| m.max(v.abs()));

    BranchStats {
        seed,
        mean_rel_err,
        average_abs_err,
        shift_gap_in_intra_std: 2.0 / 0.2,
    }
}

// ------------------------------------------------------------ distillation

#[derive(Debug, Clone)]
pub struct CorruptSpec {
    pub dim: usize,
    pub n_identities: usize,
    pub samples_per_identity: usize,
    pub intra_std: f64,
    pub outlier_std: f64,
    pub dup_isolation: f64,
}

impl Default for CorruptSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            n_identities: 20,
            samples_per_identity: 10,
            intra_std: 0.3,
            outlier_std: 1.0,
            dup_isolation: 6.0,
        }
    }
}

/// Two domains with 10% near-duplicates and 10% outliers each.
pub fn corrupted_domains(seed: u64) -> FeatureStore {
    corrupted_domains_with(&CorruptSpec::default(), seed)
}

pub fn corrupted_domains_with(c: &CorruptSpec, seed: u64) -> FeatureStore {
    let mut r = DomainRecipe::clean(c.n_identities, c.samples_per_identity, c.dim);
    r.intra_std = c.intra_std;
    r.dup_fraction = 0.1;
    r.outlier_fraction = 0.1;
    r.outlier_std = c.outlier_std;
    r.dup_isolation = c.dup_isolation;
    let mut r1 = r.clone();
    r1.shift = vec![0.3; c.dim];
    generate(&[r, r1], 300 + seed).unwrap()
}

#[derive(Debug, Clone)]
pub struct Recall {
    pub seed: u64,
    pub domain: DomainId,
    pub duplicates: f64,
    pub outliers: f64,
}

fn recall(removed: &[u64], store: &FeatureStore, flag: Flag) -> f64 {
    let removed: BTreeSet<u64> = removed.iter().copied().collect();
    let flagged: Vec<u64> = store
        .samples()
        .iter()
        .filter(|s| s.flag == Some(flag))
        .map(|s| s.id)
        .collect();
    flagged.iter().filter(|id| removed.contains(id)).count() as f64 / flagged.len() as f64
}

/// Per domain: pretrain 2000 steps on that domain alone, then remove the top
/// 20% under redundancy and under noise scoring.
pub fn distillation_recall(seed: u64) -> Vec<Recall> {
    distillation_recall_with(&CorruptSpec::default(), seed)
}

pub fn distillation_recall_with(c: &CorruptSpec, seed: u64) -> Vec<Recall> {
    let store = corrupted_domains_with(c, seed);
    let domains = store.domains();
    let base = base_config(&domains, 16, seed);
    domains
        .iter()
        .map(|&d| {
            let model = pretrain(&store, d, &base, 2000, seed).unwrap();
            let sub = store.domain_subset(&[d]);
            let red = distill(&sub, &model, &DistillPolicy::new("redundancy", 0.2).unwrap()).unwrap();
            let noi = distill(&sub, &model, &DistillPolicy::new("noise", 0.2).unwrap()).unwrap();
            Recall {
                seed,
                domain: d,
                duplicates: recall(&red.removed_ids, &sub, Flag::Duplicate),
                outliers: recall(&noi.removed_ids, &sub, Flag::Outlier),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct QualitySpec {
    pub n_identities: usize,
    pub intra_std: f64,
    pub outlier_std: f64,
    pub dup_isolation: f64,
}

impl Default for QualitySpec {
    fn default() -> Self {
        Self {
            n_identities: 30,
            intra_std: 0.5,
            outlier_std: 2.0,
            dup_isolation: 6.0,
        }
    }
}

/// Domain 0 is repetitive (20% near-duplicates), domain 1 is noisy (20%
/// outliers), domain 2 is a clean held-out domain.
pub fn mixed_quality_domains(q: &QualitySpec, seed: u64) -> FeatureStore {
    let dim = 16;
    let mut base = DomainRecipe::clean(q.n_identities, 10, dim);
    base.intra_std = q.intra_std;
    let mut repetitive = base.clone();
    repetitive.dup_fraction = 0.2;
    repetitive.dup_isolation = q.dup_isolation;
    let mut noisy = base.clone();
    noisy.shift = vec![0.3; dim];
    noisy.outlier_fraction = 0.2;
    noisy.outlier_std = q.outlier_std;
    let mut held = base;
    held.shift = vec![-0.3; dim];
    generate(&[repetitive, noisy, held], 500 + seed).unwrap()
}

/// Full data vs. 20% targeted removal (redundancy on the repetitive domain,
/// noise on the noisy one) vs. 20% random removal; trained on domains 0 and
/// 1, scored on held-out domain 2.
pub fn distillation_direction(seeds: &[u64]) -> Vec<Comparison> {
    distillation_direction_with(&QualitySpec::default(), seeds)
}

pub fn distillation_direction_with(q: &QualitySpec, seeds: &[u64]) -> Vec<Comparison> {
    seeds
        .iter()
        .map(|&seed| {
            let store = mixed_quality_domains(q, seed);
            let train_domains = [DomainId(0), DomainId(1)];
            let base = base_config(&train_domains, 16, seed);
            let plan = |modes: [&str; 2]| PrunePlan {
                fraction: 0.2,
                modes: train_domains
                    .iter()
                    .zip(modes)
                    .map(|(&d, m)| (d, m.to_string()))
                    .collect(),
                pretrain_steps: 2000,
            };
            let mut distilled = Variant::named("distilled");
            distilled.prune = Some(plan(["redundancy", "noise"]));
            let mut random = Variant::named("random");
            random.prune = Some(plan(["random", "random"]));
            run_comparison(&[Variant::named("full"), distilled, random], &store, &base, &[seed]).unwrap()
        })
        .collect()
}

// ------------------------------------------------------------ affinity

/// Four domains on a monotone shift sweep: domain k is offset by
/// base + k·step along a fixed direction.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub n_identities: usize,
    pub intra_std: f64,
    /// Offset added per domain on the second half of the coordinates.
    pub step: f64,
    /// Coordinates the 8-wide identity window slides per domain.
    pub window_step: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            n_identities: 30,
            intra_std: 0.6,
            step: 1.0,
            window_step: 2,
        }
    }
}

pub fn shift_sweep(seed: u64) -> FeatureStore {
    shift_sweep_with(&SweepSpec::default(), seed)
}

/// Four domains in 16 dimensions. Domain k moves by `step·k` on the second
/// half of the coordinates and carries identity information only on the 8
/// coordinates starting at `window_step·k`, so both its appearance and its
/// discriminative cues drift monotonically with k.
pub fn shift_sweep_with(sw: &SweepSpec, seed: u64) -> FeatureStore {
    let dim = 16;
    let recipes: Vec<DomainRecipe> = (0..4)
        .map(|k| {
            let mut r = DomainRecipe::clean(sw.n_identities, 8, dim);
            r.intra_std = sw.intra_std;
            r.shift = (0..dim)
                .map(|d| if d < dim / 2 { 1.0 } else { sw.step * k as f64 })
                .collect();
            r.nuisance_dims = dim / 2;
            r.informative_start = sw.window_step * k;
            r
        })
        .collect();
    generate(&recipes, 400 + seed).unwrap()
}

#[derive(Debug, Clone)]
pub struct AffinityRun {
    pub seed: u64,
    pub low: f64,
    pub high: f64,
}

/// Correlation of each affinity with the cross-domain rank-1 matrix. The
/// high-level matrix uses a model trained on every domain jointly.
pub fn affinity_direction(seed: u64) -> AffinityRun {
    affinity_direction_with(&SweepSpec::default(), seed)
}

pub fn affinity_direction_with(sw: &SweepSpec, seed: u64) -> AffinityRun {
    let store = shift_sweep_with(sw, seed);
    let domains = store.domains();
    let base = base_config(&domains, 16, seed);
    let transfer = transfer_matrix(&store, &base, &domains).unwrap();
    let low = low_level_affinity(&store).unwrap();
    let (joint, _) = train(&store, &base).unwrap();
    let high = high_level_affinity(&store, &joint).unwrap();
    AffinityRun {
        seed,
        low: affinity_accuracy_correlation(&low, &transfer).unwrap(),
        high: affinity_accuracy_correlation(&high, &transfer).unwrap(),
    }
}

pub fn mean_of(v: &[f64]) -> f64 {
    mean(v)
}
