//! Exhaustive reference implementations, written independently of the library
//! on plain vectors: every quantity is recomputed from its definition with
//! nested loops and no shared helpers.

/// `(domain, label)` of each row.
pub type Ids = [(u32, u32)];

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        let d = a[k] - b[k];
        s += d * d;
    }
    s.sqrt()
}

/// Mean distance from row `i` to every row of another identity in its domain.
pub fn mean_dist(emb: &[Vec<f64>], ids: &Ids, i: usize) -> Option<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for j in 0..emb.len() {
        if ids[j].0 == ids[i].0 && ids[j].1 != ids[i].1 {
            total += dist(&emb[i], &emb[j]);
            n += 1;
        }
    }
    (n > 0).then(|| total / n as f64)
}

pub fn centroid(emb: &[Vec<f64>], ids: &Ids, who: (u32, u32)) -> Vec<f64> {
    let d = emb[0].len();
    let mut c = vec![0.0; d];
    let mut n = 0.0;
    for j in 0..emb.len() {
        if ids[j] == who {
            for k in 0..d {
                c[k] += emb[j][k];
            }
            n += 1.0;
        }
    }
    for v in &mut c {
        *v /= n;
    }
    c
}

pub fn intra_dist(emb: &[Vec<f64>], ids: &Ids, i: usize) -> f64 {
    dist(&emb[i], &centroid(emb, ids, ids[i]))
}

/// Mean hinge over every valid (anchor, positive, negative) triple. Anchors
/// are restricted to `anchor_domain` when given; negatives to the anchor's
/// domain when `same_domain_negatives`.
pub fn all_valid_triplet(
    emb: &[Vec<f64>],
    ids: &Ids,
    margin: f64,
    anchor_domain: Option<u32>,
    same_domain_negatives: bool,
) -> (f64, usize) {
    let mut total = 0.0;
    let mut count = 0usize;
    for a in 0..emb.len() {
        if anchor_domain.is_some_and(|d| ids[a].0 != d) {
            continue;
        }
        for p in 0..emb.len() {
            if p == a || ids[p] != ids[a] {
                continue;
            }
            for n in 0..emb.len() {
                if ids[n] == ids[a] || (same_domain_negatives && ids[n].0 != ids[a].0) {
                    continue;
                }
                let h = dist(&emb[a], &emb[p]) - dist(&emb[a], &emb[n]) + margin;
                total += if h > 0.0 { h } else { 0.0 };
                count += 1;
            }
        }
    }
    (if count == 0 { 0.0 } else { total / count as f64 }, count)
}

/// Batch-hard: per anchor, farthest positive against nearest negative.
pub fn batch_hard_triplet(
    emb: &[Vec<f64>],
    ids: &Ids,
    margin: f64,
    anchor_domain: Option<u32>,
    same_domain_negatives: bool,
) -> (f64, usize) {
    let mut total = 0.0;
    let mut count = 0usize;
    for a in 0..emb.len() {
        if anchor_domain.is_some_and(|d| ids[a].0 != d) {
            continue;
        }
        let mut far = None::<f64>;
        let mut near = None::<f64>;
        for j in 0..emb.len() {
            if j == a {
                continue;
            }
            let d = dist(&emb[a], &emb[j]);
            if ids[j] == ids[a] {
                far = Some(far.map_or(d, |f| f.max(d)));
            } else if !same_domain_negatives || ids[j].0 == ids[a].0 {
                near = Some(near.map_or(d, |n| n.min(d)));
            }
        }
        if let (Some(f), Some(n)) = (far, near) {
            total += (f - n + margin).max(0.0);
            count += 1;
        }
    }
    (if count == 0 { 0.0 } else { total / count as f64 }, count)
}

/// Fraction of probes whose nearest gallery row (ties: smallest gallery id)
/// shares their identity.
pub fn rank1(gallery: &[(u64, (u32, u32), Vec<f64>)], probes: &[((u32, u32), Vec<f64>)]) -> f64 {
    let mut hits = 0;
    for (who, e) in probes {
        let mut best: Option<(f64, u64, (u32, u32))> = None;
        for (id, g_who, g) in gallery {
            let d = dist(e, g);
            let better = match best {
                None => true,
                Some((bd, bid, _)) => d < bd || (d == bd && *id < bid),
            };
            if better {
                best = Some((d, *id, *g_who));
            }
        }
        if best.unwrap().2 == *who {
            hits += 1;
        }
    }
    hits as f64 / probes.len() as f64
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Mean of the given rows.
pub fn mean_rows(rows: &[&Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        for k in 0..m.len() {
            m[k] += r[k];
        }
    }
    for v in &mut m {
        *v /= rows.len() as f64;
    }
    m
}

/// `|a − b| ≤ tol · max(|a|, |b|)`, or exact equality when both are zero.
pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * a.abs().max(b.abs())
}
