//! Text file formats.
//!
//! Every file opens with a format-version token line (`#gaitmix-<kind> v1`);
//! readers reject any other version. Reals are written with 17 significant
//! digits so that parsing returns the identical bits.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use crate::distill::DistillReport;
use crate::error::{Error, Result};
use crate::net::{Hyper, ModelState, NormMode, NormState, Params, RunningStats};
use crate::types::{DomainId, FeatureStore, Flag, IdentityId, Sample};

pub const FEATURES_VERSION: &str = "#gaitmix-features v1";
pub const CHECKPOINT_VERSION: &str = "#gaitmix-checkpoint v1";
pub const DISTILL_VERSION: &str = "#gaitmix-distill v1";
pub const AFFINITY_VERSION: &str = "#gaitmix-affinity v1";
pub const REPORT_VERSION: &str = "#gaitmix-report v1";
pub const LOSS_VERSION: &str = "#gaitmix-loss v1";
pub const EVAL_VERSION: &str = "#gaitmix-eval v1";
pub const COMPARE_VERSION: &str = "#gaitmix-compare v1";

/// 17 significant digits, scientific notation.
pub fn real(x: f64) -> String {
    format!("{x:.16e}")
}

pub(crate) fn parse_err(path: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

/// Checks the version token on the first line and returns the remaining
/// lines paired with 1-based line numbers.
fn expect_version<'a>(text: &'a str, token: &str, path: &str) -> Result<Vec<(usize, &'a str)>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, first)) if first.trim_end() == token => Ok(lines.collect()),
        Some((_, first)) => Err(parse_err(
            path,
            1,
            format!("expected format token '{token}', found '{}'", first.trim_end()),
        )),
        None => Err(parse_err(path, 1, "empty file")),
    }
}

fn parse_f64(s: &str, path: &str, line: usize) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| parse_err(path, line, format!("'{s}' is not a real number")))
}

fn parse_int<T: std::str::FromStr>(s: &str, path: &str, line: usize) -> Result<T> {
    s.trim()
        .parse::<T>()
        .map_err(|_| parse_err(path, line, format!("'{s}' is not a non-negative integer")))
}

// ---------------------------------------------------------------- features

pub fn write_features(store: &FeatureStore) -> String {
    let mut out = String::new();
    out.push_str(FEATURES_VERSION);
    out.push('\n');
    out.push_str("id,identity,domain,flag");
    for k in 0..store.dim() {
        let _ = write!(out, ",s{k}");
    }
    out.push('\n');
    for s in store.samples() {
        let flag = match s.flag {
            None => "-",
            Some(Flag::Duplicate) => "D",
            Some(Flag::Outlier) => "O",
        };
        let _ = write!(out, "{},{},{},{flag}", s.id, s.identity.label, s.identity.domain.0);
        for v in &s.signature {
            out.push(',');
            out.push_str(&real(*v));
        }
        out.push('\n');
    }
    out
}

pub fn parse_features(text: &str, path: &str) -> Result<FeatureStore> {
    let lines = expect_version(text, FEATURES_VERSION, path)?;
    let mut it = lines.into_iter().filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = it.next().ok_or_else(|| parse_err(path, 2, "missing header"))?;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    if cols.len() < 5 || cols[..4] != ["id", "identity", "domain", "flag"] {
        return Err(parse_err(path, hline, "header must be id,identity,domain,flag,s0,..."));
    }
    for (k, c) in cols[4..].iter().enumerate() {
        if *c != format!("s{k}") {
            return Err(parse_err(path, hline, format!("expected column s{k}, found '{c}'")));
        }
    }
    let dim = cols.len() - 4;
    let mut samples = Vec::new();
    for (ln, line) in it {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != cols.len() {
            return Err(parse_err(
                path,
                ln,
                format!("expected {} fields, found {}", cols.len(), f.len()),
            ));
        }
        let flag = match f[3] {
            "-" => None,
            "D" => Some(Flag::Duplicate),
            "O" => Some(Flag::Outlier),
            other => return Err(parse_err(path, ln, format!("unknown flag '{other}'"))),
        };
        let signature = f[4..]
            .iter()
            .map(|v| parse_f64(v, path, ln))
            .collect::<Result<Vec<f64>>>()?;
        samples.push(Sample {
            id: parse_int(f[0], path, ln)?,
            identity: IdentityId {
                domain: DomainId(parse_int(f[2], path, ln)?),
                label: parse_int(f[1], path, ln)?,
            },
            signature,
            flag,
        });
    }
    FeatureStore::new(dim, samples).map_err(|e| parse_err(path, 0, e.to_string()))
}

/// Hex SHA-256 of the store's feature-file serialization.
pub fn store_digest(store: &FeatureStore) -> String {
    hex::encode(Sha256::digest(write_features(store).as_bytes()))
}

pub fn text_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

// -------------------------------------------------------------- checkpoint

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
}

/// Header of `key=value` hyperparameters, then one `block <name> <rows> <cols>`
/// per tensor followed by its rows. Block order: w1, b1, gamma_k/beta_k per
/// branch, w2, b2, head_w_j/head_b_j per part, running_mean_k/running_var_k.
pub fn write_checkpoint(model: &ModelState) -> String {
    let h = &model.hyper;
    let mut out = String::new();
    let _ = writeln!(out, "{CHECKPOINT_VERSION}");
    let _ = writeln!(out, "d_in={}", h.d_in);
    let _ = writeln!(out, "hidden={}", h.hidden);
    let _ = writeln!(out, "d_emb={}", h.d_emb);
    let _ = writeln!(out, "parts={}", h.parts);
    let _ = writeln!(out, "norm={}", h.norm);
    let _ = writeln!(out, "eps={}", real(h.eps));
    let _ = writeln!(out, "bn_momentum={}", real(h.bn_momentum));
    let _ = writeln!(
        out,
        "branch_domains={}",
        join(model.norm.branch_domains.iter().map(|d| d.0))
    );
    let _ = writeln!(
        out,
        "classes={}",
        join(model.classes.iter().map(|(d, (o, c))| format!("{}:{o}:{c}", d.0)))
    );

    let mut block = |name: &str, rows: usize, cols: usize, data: &[f64]| {
        let _ = writeln!(out, "block {name} {rows} {cols}");
        for r in 0..rows {
            let line: Vec<String> = data[r * cols..(r + 1) * cols].iter().map(|&v| real(v)).collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
    };
    let p = &model.params;
    let shape2 = |a: &Array2<f64>| a.dim();
    let tensors = p.tensors();
    let mut shapes: Vec<(usize, usize)> = vec![shape2(&p.w1), (1, p.b1.len())];
    for (g, b) in p.gamma.iter().zip(&p.beta) {
        shapes.push((1, g.len()));
        shapes.push((1, b.len()));
    }
    shapes.push(shape2(&p.w2));
    shapes.push((1, p.b2.len()));
    for (w, b) in p.head_w.iter().zip(&p.head_b) {
        shapes.push(shape2(w));
        shapes.push((1, b.len()));
    }
    for ((name, data), (r, c)) in tensors.iter().zip(shapes) {
        block(name, r, c, data);
    }
    for (k, s) in model.norm.stats.iter().enumerate() {
        block(&format!("running_mean{k}"), 1, s.mean.len(), s.mean.as_slice().unwrap());
        block(&format!("running_var{k}"), 1, s.var.len(), s.var.as_slice().unwrap());
    }
    out
}

pub fn parse_checkpoint(text: &str, path: &str) -> Result<ModelState> {
    let lines = expect_version(text, CHECKPOINT_VERSION, path)?;
    let mut header: BTreeMap<String, (usize, String)> = BTreeMap::new();
    let mut blocks: BTreeMap<String, (usize, usize, Vec<f64>)> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let (ln, line) = lines[i];
        let line = line.trim_end();
        i += 1;
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("block ") {
            let f: Vec<&str> = rest.split_whitespace().collect();
            if f.len() != 3 {
                return Err(parse_err(path, ln, "block line must be 'block <name> <rows> <cols>'"));
            }
            let rows: usize = parse_int(f[1], path, ln)?;
            let cols: usize = parse_int(f[2], path, ln)?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (rl, row) = *lines
                    .get(i)
                    .ok_or_else(|| parse_err(path, ln, format!("block {} truncated", f[0])))?;
                i += 1;
                let vals = if cols == 0 {
                    Vec::new()
                } else {
                    row.trim_end()
                        .split(',')
                        .map(|v| parse_f64(v, path, rl))
                        .collect::<Result<Vec<f64>>>()?
                };
                if vals.len() != cols {
                    return Err(parse_err(
                        path,
                        rl,
                        format!("expected {cols} values, found {}", vals.len()),
                    ));
                }
                data.extend(vals);
            }
            order.push(f[0].to_string());
            blocks.insert(f[0].to_string(), (rows, cols, data));
        } else if let Some((k, v)) = line.split_once('=') {
            if !blocks.is_empty() {
                return Err(parse_err(path, ln, "header keys must precede blocks"));
            }
            header.insert(k.trim().to_string(), (ln, v.trim().to_string()));
        } else {
            return Err(parse_err(path, ln, format!("unrecognized line '{line}'")));
        }
    }

    let get = |k: &str| -> Result<(usize, &str)> {
        header
            .get(k)
            .map(|(l, v)| (*l, v.as_str()))
            .ok_or_else(|| parse_err(path, 0, format!("missing header key '{k}'")))
    };
    let usize_key = |k: &str| -> Result<usize> {
        let (l, v) = get(k)?;
        parse_int(v, path, l)
    };
    let real_key = |k: &str| -> Result<f64> {
        let (l, v) = get(k)?;
        parse_f64(v, path, l)
    };
    let (nl, norm) = get("norm")?;
    let norm: NormMode = norm.parse().map_err(|e: Error| parse_err(path, nl, e.to_string()))?;
    let hyper = Hyper {
        d_in: usize_key("d_in")?,
        hidden: usize_key("hidden")?,
        d_emb: usize_key("d_emb")?,
        parts: usize_key("parts")?,
        norm,
        eps: real_key("eps")?,
        bn_momentum: real_key("bn_momentum")?,
    };
    let (bl, bd) = get("branch_domains")?;
    let branch_domains: Vec<DomainId> = if bd.is_empty() {
        Vec::new()
    } else {
        bd.split(',')
            .map(|v| parse_int(v, path, bl).map(DomainId))
            .collect::<Result<_>>()?
    };
    let (cl, cs) = get("classes")?;
    let mut classes = BTreeMap::new();
    for entry in cs.split(',').filter(|e| !e.is_empty()) {
        let f: Vec<&str> = entry.split(':').collect();
        if f.len() != 3 {
            return Err(parse_err(
                path,
                cl,
                format!("class entry '{entry}' must be domain:offset:count"),
            ));
        }
        classes.insert(
            DomainId(parse_int(f[0], path, cl)?),
            (parse_int(f[1], path, cl)?, parse_int(f[2], path, cl)?),
        );
    }

    let mut take = |name: &str| -> Result<(usize, usize, Vec<f64>)> {
        blocks
            .remove(name)
            .ok_or_else(|| parse_err(path, 0, format!("missing block '{name}'")))
    };
    let mat = |b: (usize, usize, Vec<f64>)| Array2::from_shape_vec((b.0, b.1), b.2).expect("sized by reader");
    let vec1 = |b: (usize, usize, Vec<f64>)| Array1::from_vec(b.2);
    let n_branches = match hyper.norm {
        NormMode::Single => 1,
        NormMode::Dsbn => branch_domains.len(),
    };
    let w1 = mat(take("w1")?);
    let b1 = vec1(take("b1")?);
    let mut gamma = Vec::new();
    let mut beta = Vec::new();
    for k in 0..n_branches {
        gamma.push(vec1(take(&format!("gamma{k}"))?));
        beta.push(vec1(take(&format!("beta{k}"))?));
    }
    let w2 = mat(take("w2")?);
    let b2 = vec1(take("b2")?);
    let mut head_w = Vec::new();
    let mut head_b = Vec::new();
    for j in 0..hyper.parts {
        head_w.push(mat(take(&format!("head_w{j}"))?));
        head_b.push(vec1(take(&format!("head_b{j}"))?));
    }
    let mut stats = Vec::new();
    for k in 0..n_branches {
        stats.push(RunningStats {
            mean: vec1(take(&format!("running_mean{k}"))?),
            var: vec1(take(&format!("running_var{k}"))?),
        });
    }
    if let Some(extra) = order.iter().find(|n| blocks.contains_key(*n)) {
        return Err(parse_err(path, 0, format!("unexpected block '{extra}'")));
    }
    let norm_state = NormState {
        mode: hyper.norm,
        momentum: hyper.bn_momentum,
        eps: hyper.eps,
        branch_domains,
        stats,
    };
    let params = Params {
        w1,
        b1,
        gamma,
        beta,
        w2,
        b2,
        head_w,
        head_b,
    };
    ModelState::from_parts(hyper, params, norm_state, classes).map_err(|e| parse_err(path, 0, e.to_string()))
}

// ------------------------------------------------------------------ reports

pub fn write_distill_report(report: &DistillReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{DISTILL_VERSION}");
    let _ = writeln!(
        out,
        "#policy mode={} fraction={} seed={}",
        report.policy.mode,
        real(report.policy.removal_fraction),
        report.policy.seed
    );
    let _ = writeln!(out, "#retained_digest={}", report.retained_digest);
    let _ = writeln!(
        out,
        "#removed={} shortfall={}",
        report.removed_ids.len(),
        report.shortfall
    );
    let _ = writeln!(out, "sample_id,mean_dist,intra_dist,failure,removed");
    for s in &report.scores {
        let removed = report.removed_ids.binary_search(&s.sample_id).is_ok();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            s.sample_id,
            s.mean_dist.map_or_else(|| "-".to_string(), real),
            real(s.intra_dist),
            s.failure as u8,
            removed as u8
        );
    }
    out
}

/// Parsed rows of a distillation report: (sample_id, mean_dist, intra_dist, failure, removed).
pub type DistillRow = (u64, Option<f64>, f64, bool, bool);

pub fn parse_distill_report(text: &str, path: &str) -> Result<Vec<DistillRow>> {
    let lines = expect_version(text, DISTILL_VERSION, path)?;
    let mut rows = Vec::new();
    let mut header_seen = false;
    for (ln, line) in lines {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !header_seen {
            if line != "sample_id,mean_dist,intra_dist,failure,removed" {
                return Err(parse_err(path, ln, "bad distill report header"));
            }
            header_seen = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(parse_err(path, ln, "expected 5 fields"));
        }
        let flag = |s: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(parse_err(path, ln, format!("'{s}' is not 0 or 1"))),
        };
        rows.push((
            parse_int(f[0], path, ln)?,
            if f[1] == "-" {
                None
            } else {
                Some(parse_f64(f[1], path, ln)?)
            },
            parse_f64(f[2], path, ln)?,
            flag(f[3])?,
            flag(f[4])?,
        ));
    }
    Ok(rows)
}

/// Square matrix with domain headers, e.g. an affinity or transfer matrix.
pub fn write_matrix(version: &str, meta: &[(&str, String)], domains: &[DomainId], values: &Array2<f64>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{version}");
    for (k, v) in meta {
        let _ = writeln!(out, "#{k}={v}");
    }
    let _ = writeln!(out, "domain,{}", join(domains.iter().map(|d| format!("d{}", d.0))));
    for (i, d) in domains.iter().enumerate() {
        let row: Vec<String> = values.row(i).iter().map(|&v| real(v)).collect();
        let _ = writeln!(out, "d{},{}", d.0, row.join(","));
    }
    out
}

pub fn parse_matrix(text: &str, version: &str, path: &str) -> Result<(Vec<DomainId>, Array2<f64>)> {
    let lines = expect_version(text, version, path)?;
    let mut data: Vec<(usize, &str)> = lines
        .into_iter()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .collect();
    if data.is_empty() {
        return Err(parse_err(path, 2, "missing header"));
    }
    let (hl, header) = data.remove(0);
    let domain_of = |s: &str, l: usize| -> Result<DomainId> {
        s.strip_prefix('d')
            .ok_or_else(|| parse_err(path, l, format!("'{s}' is not a domain label")))
            .and_then(|v| parse_int(v, path, l).map(DomainId))
    };
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    if cols.first() != Some(&"domain") {
        return Err(parse_err(path, hl, "header must start with 'domain'"));
    }
    let domains = cols[1..].iter().map(|c| domain_of(c, hl)).collect::<Result<Vec<_>>>()?;
    let n = domains.len();
    if data.len() != n {
        return Err(parse_err(path, hl, format!("expected {n} rows, found {}", data.len())));
    }
    let mut m = Array2::zeros((n, n));
    for (i, (ln, line)) in data.into_iter().enumerate() {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != n + 1 || domain_of(f[0], ln)? != domains[i] {
            return Err(parse_err(path, ln, "row does not match header"));
        }
        for j in 0..n {
            m[[i, j]] = parse_f64(f[j + 1], path, ln)?;
        }
    }
    Ok((domains, m))
}
