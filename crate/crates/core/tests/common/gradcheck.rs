//! Central finite differences of the combined training loss against the
//! network's analytic parameter gradients.

use std::collections::BTreeMap;
use std::fmt;

use gaitmix::losses::{self, combined_loss, DomainWeights, LossInput, Mining, TripletConfig};
use gaitmix::net::{signature_matrix, Hyper, ModelState, NormMode, Pass};
use gaitmix::sampler::{sample_batch, BatchSpec};
use gaitmix::synth::{generate, DomainRecipe};
use gaitmix::{DomainId, IdentityId, Rng, Sample};
use ndarray::Array2;

/// Step of the central difference.
pub const H: f64 = 1e-6;
/// Relative error is `|a − n| / max(|a|, |n|, FLOOR)`: below FLOOR the
/// difference quotient is dominated by rounding (≈ ε·|loss|/h ≈ 1e-10), so
/// the comparison becomes absolute.
pub const FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct GradCase {
    pub norm: NormMode,
    pub objective: &'static str,
    pub parts: usize,
    pub mining: Mining,
}

impl fmt::Display for GradCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/p={}/{}", self.norm, self.objective, self.parts, self.mining)
    }
}

/// The 20 cases: {single, dsbn} × {naive, separate} × p ∈ {1, 2, 4}, cycled,
/// alternating the mining rule.
pub fn standard_cases() -> Vec<GradCase> {
    let mut out = Vec::new();
    for i in 0..20 {
        let combo = i % 12;
        out.push(GradCase {
            norm: if combo / 6 == 0 {
                NormMode::Single
            } else {
                NormMode::Dsbn
            },
            objective: if (combo / 3) % 2 == 0 { "naive" } else { "separate" },
            parts: [1, 2, 4][combo % 3],
            mining: if i % 2 == 0 {
                Mining::BatchHard
            } else {
                Mining::AllValid
            },
        });
    }
    out
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub case: GradCase,
    pub seed: u64,
    pub coordinates: usize,
    pub max_rel: f64,
    pub max_abs: f64,
    pub worst: String,
    /// Batches discarded because a perturbation crossed a ReLU or hinge kink.
    pub resampled: usize,
}

struct Problem {
    model: ModelState,
    x: Array2<f64>,
    domains: Vec<DomainId>,
    ids: Vec<IdentityId>,
    labels: Vec<usize>,
    weights: DomainWeights,
    triplet: TripletConfig,
}

struct Eval {
    total: f64,
    relu: Vec<bool>,
    active: Vec<(usize, usize, usize)>,
}

impl Problem {
    fn build(case: GradCase, seed: u64) -> Self {
        let mut r = DomainRecipe::clean(4, 3, 5);
        r.intra_std = 0.3;
        let mut r1 = r.clone();
        r1.shift = vec![0.4; 5];
        let store = generate(&[r, r1], seed).unwrap();
        let doms = store.domains();
        let mut rng = Rng::stream(seed, 77);
        let idx = sample_batch(&store, &BatchSpec::uniform(&doms, 3, 2).unwrap(), &mut rng).unwrap();
        let batch: Vec<&Sample> = idx.iter().map(|&i| store.sample(i)).collect();

        let mut h = Hyper::new(5);
        h.hidden = 6;
        h.d_emb = 8;
        h.parts = case.parts;
        h.norm = case.norm;
        let counts: BTreeMap<DomainId, usize> = doms.iter().map(|&d| (d, 4)).collect();
        let mut model = ModelState::init(h, &counts, &mut rng).unwrap();
        // move away from the symmetric initial point (unit gamma, zero biases)
        for t in model.params_mut().tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.normal(0.0, 0.2);
            }
        }
        let ids: Vec<IdentityId> = batch.iter().map(|s| s.identity).collect();
        let labels = ids.iter().map(|&i| model.class_of(i).unwrap()).collect();
        Self {
            x: signature_matrix(&batch),
            domains: batch.iter().map(|s| s.domain()).collect(),
            ids,
            labels,
            weights: DomainWeights::new(doms.iter().map(|&d| (d, rng.uniform() * 1.5 + 0.2)).collect()).unwrap(),
            triplet: TripletConfig {
                margin: 0.2,
                mining: case.mining,
            },
            model,
        }
    }

    fn eval(&self, model: &ModelState, objective: &str) -> (Eval, Option<gaitmix::net::Params>) {
        let mut m = model.clone();
        let out = m.forward(self.x.view(), &self.domains, Pass::Train).unwrap();
        let obj = losses::objective(objective).unwrap();
        let loss = combined_loss(
            LossInput {
                embeddings: out.embeddings.view(),
                identities: &self.ids,
                part_logits: out.part_logits.view(),
                labels: &self.labels,
            },
            &self.weights,
            &self.triplet,
            obj.as_ref(),
        )
        .unwrap();
        let grads = m
            .backward(&out.cache, &loss.grad_embeddings, &loss.grad_logits)
            .unwrap();
        (
            Eval {
                total: loss.total,
                relu: out.cache.relu_mask(),
                active: loss.active_triples,
            },
            Some(grads),
        )
    }
}

/// Checks every parameter coordinate of one (config, batch) pair. A batch
/// whose ±h perturbations change the ReLU pattern or the active triple set
/// sits on a kink of the piecewise-smooth loss and is replaced by a fresh one.
pub fn check(case: GradCase, seed: u64) -> GradReport {
    let mut resampled = 0;
    'attempt: for attempt in 0..100u64 {
        let prob = Problem::build(case, seed * 1000 + attempt);
        let (base, grads) = prob.eval(&prob.model, case.objective);
        if base.active.is_empty() {
            resampled += 1;
            continue;
        }
        let mut grads = grads.unwrap();
        let analytic: Vec<Vec<f64>> = grads.tensors_mut().into_iter().map(|t| t.to_vec()).collect();
        let names: Vec<String> = prob.model.params.tensors().into_iter().map(|(n, _)| n).collect();
        let (mut max_rel, mut max_abs, mut worst, mut coords) = (0.0f64, 0.0f64, String::new(), 0);
        for (t, name) in names.iter().enumerate() {
            for j in 0..analytic[t].len() {
                let mut plus = prob.model.clone();
                plus.params_mut().tensors_mut()[t][j] += H;
                let mut minus = prob.model.clone();
                minus.params_mut().tensors_mut()[t][j] -= H;
                let (ep, _) = prob.eval(&plus, case.objective);
                let (em, _) = prob.eval(&minus, case.objective);
                if ep.relu != base.relu || em.relu != base.relu || ep.active != base.active || em.active != base.active
                {
                    resampled += 1;
                    continue 'attempt;
                }
                let numeric = (ep.total - em.total) / (2.0 * H);
                let a = analytic[t][j];
                let abs = (a - numeric).abs();
                let rel = abs / a.abs().max(numeric.abs()).max(FLOOR);
                max_abs = max_abs.max(abs);
                if rel > max_rel {
                    max_rel = rel;
                    worst = format!("{name}[{j}] analytic {a:.6e} numeric {numeric:.6e}");
                }
                coords += 1;
            }
        }
        return GradReport {
            case,
            seed,
            coordinates: coords,
            max_rel,
            max_abs,
            worst,
            resampled,
        };
    }
    panic!("no kink-free batch found for {case} after 100 attempts");
}
