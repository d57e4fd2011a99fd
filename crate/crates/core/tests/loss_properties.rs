//! Properties of the combined objective checked from outside the crate.

mod common;

use std::collections::BTreeMap;

use common::gradcheck::{FLOOR, H};
use gaitmix::losses::{
    combined_loss, objective, DomainWeights, LossInput, Mining, TripletConfig, TripletObjective, TripletValue,
};
use gaitmix::{DomainId, IdentityId, Result, Rng};
use ndarray::{Array2, Array3, ArrayView2};

/// Reports preset per-domain values regardless of the embeddings.
struct Fixed(BTreeMap<DomainId, f64>);

impl TripletObjective for Fixed {
    fn name(&self) -> &'static str {
        "fixed"
    }

    fn admits_negative(&self, _anchor: DomainId, _candidate: DomainId) -> bool {
        true
    }

    fn per_domain(
        &self,
        emb: ArrayView2<f64>,
        _ids: &[IdentityId],
        _cfg: &TripletConfig,
    ) -> Result<BTreeMap<DomainId, TripletValue>> {
        Ok(self
            .0
            .iter()
            .map(|(&d, &value)| {
                let v = TripletValue {
                    value,
                    grad: Array2::zeros(emb.raw_dim()),
                    triples: 1,
                    active: vec![],
                };
                (d, v)
            })
            .collect())
    }
}

#[test]
fn weighted_sum_example_totals_one_point_one() {
    // triplet terms 0.5 and 0.3, weights 0.2 and 1.0, cross-entropy 0.7
    let fixed = Fixed([(DomainId(0), 0.5), (DomainId(1), 0.3)].into());
    let weights = DomainWeights::new([(DomainId(0), 0.2), (DomainId(1), 1.0)].into()).unwrap();
    // ln(1 + e^x) = 0.7 for logits (0, x) with the true class first
    let x = (0.7f64.exp() - 1.0).ln();
    let logits = Array3::from_shape_fn((2, 1, 2), |(_, _, k)| if k == 0 { 0.0 } else { x });
    let emb = Array2::zeros((2, 3));
    let ids = [IdentityId::new(0, 0), IdentityId::new(1, 0)];
    let out = combined_loss(
        LossInput {
            embeddings: emb.view(),
            identities: &ids,
            part_logits: logits.view(),
            labels: &[0, 0],
        },
        &weights,
        &TripletConfig::default(),
        &fixed,
    )
    .unwrap();
    assert!((out.cross_entropy - 0.7).abs() < 1e-15, "{}", out.cross_entropy);
    assert!((out.total - 1.1).abs() < 1e-15, "{}", out.total);
}

/// Loss value of the combined objective and its active triples.
fn evaluate(
    emb: &Array2<f64>,
    logits: &Array3<f64>,
    ids: &[IdentityId],
    labels: &[usize],
    weights: &DomainWeights,
    cfg: &TripletConfig,
    obj: &dyn TripletObjective,
) -> gaitmix::losses::LossBreakdown {
    combined_loss(
        LossInput {
            embeddings: emb.view(),
            identities: ids,
            part_logits: logits.view(),
            labels,
        },
        weights,
        cfg,
        obj,
    )
    .unwrap()
}

#[test]
fn combined_loss_gradients_match_finite_differences() {
    // 2 domains × 3 identities × 2 samples, 4-d embeddings, 2 parts, 6 classes
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    for d in 0..2u32 {
        for l in 0..3u32 {
            for _ in 0..2 {
                ids.push(IdentityId::new(d, l));
                labels.push((d * 3 + l) as usize);
            }
        }
    }
    let weights = DomainWeights::new([(DomainId(0), 0.2), (DomainId(1), 1.0)].into()).unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..40u64 {
        let name = if seed % 2 == 0 { "separate" } else { "naive" };
        let mining = if seed % 4 < 2 {
            Mining::BatchHard
        } else {
            Mining::AllValid
        };
        let cfg = TripletConfig { margin: 0.2, mining };
        let obj = objective(name).unwrap();
        let mut rng = Rng::new(seed);
        let emb = Array2::from_shape_fn((12, 4), |_| rng.normal(0.0, 0.5));
        let logits = Array3::from_shape_fn((12, 2, 6), |_| rng.normal(0.0, 1.0));
        let base = evaluate(&emb, &logits, &ids, &labels, &weights, &cfg, obj.as_ref());
        let mut kinked = false;
        for idx in 0..emb.len() {
            let (mut plus, mut minus) = (emb.clone(), emb.clone());
            plus.as_slice_mut().unwrap()[idx] += H;
            minus.as_slice_mut().unwrap()[idx] -= H;
            let lp = evaluate(&plus, &logits, &ids, &labels, &weights, &cfg, obj.as_ref());
            let lm = evaluate(&minus, &logits, &ids, &labels, &weights, &cfg, obj.as_ref());
            if lp.active_triples != base.active_triples || lm.active_triples != base.active_triples {
                kinked = true;
                break;
            }
            let numeric = (lp.total - lm.total) / (2.0 * H);
            let a = base.grad_embeddings.as_slice().unwrap()[idx];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR));
            checked += 1;
        }
        if kinked {
            continue;
        }
        for idx in 0..logits.len() {
            let (mut plus, mut minus) = (logits.clone(), logits.clone());
            plus.as_slice_mut().unwrap()[idx] += H;
            minus.as_slice_mut().unwrap()[idx] -= H;
            let lp = evaluate(&emb, &plus, &ids, &labels, &weights, &cfg, obj.as_ref());
            let lm = evaluate(&emb, &minus, &ids, &labels, &weights, &cfg, obj.as_ref());
            let numeric = (lp.total - lm.total) / (2.0 * H);
            let a = base.grad_logits.as_slice().unwrap()[idx];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR));
            checked += 1;
        }
    }
    assert!(checked > 1000, "only {checked} coordinates checked");
    assert!(worst <= 1e-5, "worst relative error {worst:.3e}");
}

/// Anchor (0,0) of domain 0 with positive (0.1,0); domain 1's copy of the
/// same pair sits `offset` away on axis 1. Only cross-domain negatives can
/// violate the margin.
fn cross_domain_only(offset: f64) -> (Array2<f64>, Vec<IdentityId>) {
    let rows = [
        [0.0, 0.0],
        [0.1, 0.0],
        [3.0, 0.0],
        [3.1, 0.0],
        [0.0, offset],
        [0.1, offset],
        [3.0, offset],
        [3.1, offset],
    ];
    let ids = [(0, 0), (0, 0), (0, 1), (0, 1), (1, 0), (1, 0), (1, 1), (1, 1)]
        .iter()
        .map(|&(d, l)| IdentityId::new(d, l))
        .collect();
    (Array2::from_shape_fn((8, 2), |(i, k)| rows[i][k]), ids)
}

#[test]
fn naive_repulsion_switches_on_below_the_margin() {
    // Cross-domain hinge for the closest pair: 0.1 − offset + 0.2 > 0 ⇔ offset < 0.3.
    let weights = DomainWeights::uniform(&[DomainId(0), DomainId(1)], 1.0);
    let logits = Array3::zeros((8, 1, 4));
    let labels = [0, 0, 1, 1, 2, 2, 3, 3];
    let naive = objective("naive").unwrap();
    let separate = objective("separate").unwrap();
    for mining in [Mining::BatchHard, Mining::AllValid] {
        let cfg = TripletConfig { margin: 0.2, mining };
        for offset in [0.05, 0.1, 0.2, 0.29, 0.31, 0.5, 1.0, 2.0] {
            let (emb, ids) = cross_domain_only(offset);
            let n = evaluate(&emb, &logits, &ids, &labels, &weights, &cfg, naive.as_ref());
            let s = evaluate(&emb, &logits, &ids, &labels, &weights, &cfg, separate.as_ref());
            let g_axis = |o: &gaitmix::losses::LossBreakdown| o.grad_embeddings.column(1).iter().any(|&v| v != 0.0);
            assert_eq!(g_axis(&n), offset < 0.3, "{mining} offset {offset}");
            assert!(!g_axis(&s), "{mining} offset {offset}");
            assert!(s.active_triples.is_empty());
            // the push is away from the other domain: anchor (0,0) is driven to negative axis-1 values
            if offset < 0.3 {
                assert!(n.grad_embeddings[[0, 1]] > 0.0, "{mining} offset {offset}");
            }
        }
    }
}
