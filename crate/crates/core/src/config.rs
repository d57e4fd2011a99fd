//! Strict flat `key = value` configuration.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Keys are dotted, and `domain{k}` segments address one domain (for example
//! `synth.domain1.shift`). Any key not listed in [`KEYS`] is rejected, as is a
//! repeated key. Per-domain keys fall back to their section-wide form
//! (`synth.domain1.intra_std` → `synth.intra_std`) and then to the default.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::{self, DomainWeights, Mining, TripletConfig};
use crate::net::NormMode;
use crate::sampler::{BatchSpec, LrSchedule};
use crate::synth::DomainRecipe;
use crate::trainer::{ModelSpec, PrunePlan, TrainConfig, Variant};
use crate::types::{DomainId, FeatureStore};

/// Every accepted key: (pattern, default, meaning). `{k}` stands for a domain
/// index. An empty default means "derived", as described.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("synth.domains", "2", "number of generated domains"),
    ("synth.dim", "16", "signature dimension"),
    ("synth.n_identities", "20", "identities per domain"),
    ("synth.samples_per_identity", "10", "samples per identity"),
    ("synth.identity_spread", "1.0", "std of identity centers"),
    ("synth.intra_std", "0.1", "within-identity noise std"),
    ("synth.shift", "0", "domain offset: one number (broadcast) or a comma list of synth.dim numbers"),
    ("synth.scale", "1.0", "gain applied to identity centers"),
    ("synth.dup_fraction", "0", "fraction of samples replaced by near-duplicates"),
    ("synth.outlier_fraction", "0", "fraction of samples redrawn as outliers"),
    ("synth.outlier_std", "1.0", "outlier spread around the identity center"),
    ("synth.nuisance_dims", "0", "coordinates with no identity information, offset and noise only (trailing unless synth.informative_start moves them)"),
    ("synth.informative_start", "0", "first identity coordinate; the identity window wraps and the rest are nuisance"),
    ("synth.dup_isolation", "1.0", "factor pushing duplicated identities away from the domain offset"),
    ("synth.domain{k}.n_identities", "", "per-domain override"),
    ("synth.domain{k}.samples_per_identity", "", "per-domain override"),
    ("synth.domain{k}.identity_spread", "", "per-domain override"),
    ("synth.domain{k}.intra_std", "", "per-domain override"),
    ("synth.domain{k}.shift", "", "per-domain override"),
    ("synth.domain{k}.scale", "", "per-domain override"),
    ("synth.domain{k}.dup_fraction", "", "per-domain override"),
    ("synth.domain{k}.outlier_fraction", "", "per-domain override"),
    ("synth.domain{k}.outlier_std", "", "per-domain override"),
    ("synth.domain{k}.nuisance_dims", "", "per-domain override"),
    ("synth.domain{k}.informative_start", "", "per-domain override"),
    ("synth.domain{k}.dup_isolation", "", "per-domain override"),
    ("model.hidden", "32", "hidden width"),
    ("model.embedding", "16", "embedding width"),
    ("model.parts", "2", "number of part heads; must divide model.embedding"),
    ("model.norm", "single", "single | dsbn (domain-specific batch norm)"),
    ("model.eps", "1e-5", "batch-norm epsilon"),
    ("model.bn_momentum", "0.1", "running-statistics momentum"),
    ("train.domains", "", "comma list of training domains; empty: every domain in the data"),
    ("train.steps", "2000", "SGD steps"),
    ("train.lr", "0.1", "initial learning rate"),
    ("train.decay_steps", "1000,1500", "comma list of steps where the rate is multiplied by train.decay_factor"),
    ("train.decay_factor", "0.1", "learning-rate decay factor"),
    ("train.momentum", "0.9", "SGD momentum"),
    ("train.weight_decay", "5e-4", "L2 weight decay"),
    ("train.margin", "0.2", "triplet margin"),
    ("train.mining", "batch-hard", "batch-hard | all-valid"),
    ("train.objective", "separate", "separate | naive triplet objective"),
    ("train.p", "8", "identities per domain per batch"),
    ("train.k", "4", "samples per identity per batch"),
    ("train.weight", "1.0", "triplet weight of every training domain"),
    ("train.eval_every", "0", "evaluate every N steps (0: only at the end)"),
    ("train.domain{k}.p", "", "per-domain override"),
    ("train.domain{k}.k", "", "per-domain override"),
    ("train.domain{k}.weight", "", "per-domain override"),
    ("eval.gallery_per_identity", "2", "first N samples of each identity form the gallery"),
    ("distill.mode", "noise", "redundancy | noise | random"),
    ("distill.fraction", "0.2", "fraction of each domain to remove"),
    ("distill.pretrain_steps", "2000", "steps of the per-domain scoring model"),
    ("distill.domains", "", "comma list of domains to prune; empty: every training domain"),
    ("distill.domain{k}.mode", "", "per-domain override"),
    ("compare.seeds", "5", "number of seeds per variant (seed, seed+1, ...)"),
];

fn segment_matches(pattern: &str, seg: &str) -> bool {
    match pattern.strip_suffix("{k}") {
        Some(prefix) => seg
            .strip_prefix(prefix)
            .is_some_and(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit())),
        None => pattern == seg,
    }
}

fn key_matches(pattern: &str, key: &str) -> bool {
    let p: Vec<&str> = pattern.split('.').collect();
    let k: Vec<&str> = key.split('.').collect();
    p.len() == k.len() && p.iter().zip(&k).all(|(a, b)| segment_matches(a, b))
}

pub fn is_known_key(key: &str) -> bool {
    KEYS.iter().any(|(p, _, _)| key_matches(p, key))
}

fn default_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(p, _, _)| *p == key).map(|(_, d, _)| *d)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut cfg = Self::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_string(),
                line: n + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if !is_known_key(k) {
                return Err(err(format!("unknown key `{k}`")));
            }
            if cfg.values.insert(k.to_string(), v.to_string()).is_some() {
                return Err(err(format!("key `{k}` given twice")));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !is_known_key(key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    /// Explicit value or documented default.
    pub fn str(&self, key: &str) -> Result<&str> {
        if let Some(v) = self.values.get(key) {
            return Ok(v);
        }
        default_of(key).ok_or_else(|| Error::Config(format!("no value or default for `{key}`")))
    }

    /// `{section}.domain{k}.{field}`, falling back to `{section}.{field}`.
    pub fn domain_str(&self, section: &str, k: u32, field: &str) -> Result<&str> {
        match self.values.get(&format!("{section}.domain{k}.{field}")) {
            Some(v) => Ok(v),
            None => self.str(&format!("{section}.{field}")),
        }
    }

    fn typed<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        v.parse::<T>()
            .map_err(|e| Error::Config(format!("`{key}` = `{v}`: {e}")))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        Self::typed(key, self.str(key)?)
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        Self::typed(key, self.str(key)?)
    }

    pub fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| Self::typed(key, s))
            .collect()
    }

    pub fn domain_f64(&self, section: &str, k: u32, field: &str) -> Result<f64> {
        Self::typed(
            &format!("{section}.domain{k}.{field}"),
            self.domain_str(section, k, field)?,
        )
    }

    pub fn domain_usize(&self, section: &str, k: u32, field: &str) -> Result<usize> {
        Self::typed(
            &format!("{section}.domain{k}.{field}"),
            self.domain_str(section, k, field)?,
        )
    }

    /// Domains listed under `key`, or `None` when the list is empty.
    pub fn domain_list(&self, key: &str) -> Result<Option<Vec<DomainId>>> {
        let v: Vec<u32> = Self::list(key, self.str(key)?)?;
        Ok((!v.is_empty()).then(|| v.into_iter().map(DomainId).collect()))
    }
}

/// One recipe per `synth.domains`.
pub fn recipes(cfg: &Config) -> Result<Vec<DomainRecipe>> {
    let n = cfg.usize("synth.domains")?;
    let dim = cfg.usize("synth.dim")?;
    if n == 0 || dim == 0 {
        return Err(Error::Config("synth.domains and synth.dim must be positive".into()));
    }
    (0..n as u32)
        .map(|k| {
            let key = format!("synth.domain{k}.shift");
            let shift: Vec<f64> = Config::list(&key, cfg.domain_str("synth", k, "shift")?)?;
            let shift = match shift.len() {
                1 => vec![shift[0]; dim],
                l if l == dim => shift,
                l => {
                    return Err(Error::Config(format!(
                        "`{key}` has {l} components, expected 1 or {dim}"
                    )))
                }
            };
            let r = DomainRecipe {
                n_identities: cfg.domain_usize("synth", k, "n_identities")?,
                samples_per_identity: cfg.domain_usize("synth", k, "samples_per_identity")?,
                identity_spread: cfg.domain_f64("synth", k, "identity_spread")?,
                intra_std: cfg.domain_f64("synth", k, "intra_std")?,
                shift,
                scale: cfg.domain_f64("synth", k, "scale")?,
                dup_fraction: cfg.domain_f64("synth", k, "dup_fraction")?,
                outlier_fraction: cfg.domain_f64("synth", k, "outlier_fraction")?,
                outlier_std: cfg.domain_f64("synth", k, "outlier_std")?,
                nuisance_dims: cfg.domain_usize("synth", k, "nuisance_dims")?,
                informative_start: cfg.domain_usize("synth", k, "informative_start")?,
                dup_isolation: cfg.domain_f64("synth", k, "dup_isolation")?,
            };
            r.validate()
                .map_err(|e| Error::Config(format!("synth domain {k}: {e}")))?;
            Ok(r)
        })
        .collect()
}

/// Training configuration for `store`; the seed comes from the command line.
pub fn train_config(cfg: &Config, store: &FeatureStore, seed: u64) -> Result<TrainConfig> {
    let domains = cfg.domain_list("train.domains")?.unwrap_or_else(|| store.domains());
    if domains.is_empty() {
        return Err(Error::Config("no training domains".into()));
    }
    let mut pk = BTreeMap::new();
    let mut weights = BTreeMap::new();
    for &d in &domains {
        pk.insert(
            d,
            (
                cfg.domain_usize("train", d.0, "p")?,
                cfg.domain_usize("train", d.0, "k")?,
            ),
        );
        weights.insert(d, cfg.domain_f64("train", d.0, "weight")?);
    }
    let norm: NormMode = cfg
        .str("model.norm")?
        .parse()
        .map_err(|e| Error::Config(format!("model.norm: {e}")))?;
    let mining: Mining = cfg
        .str("train.mining")?
        .parse()
        .map_err(|e| Error::Config(format!("train.mining: {e}")))?;
    let objective = cfg.str("train.objective")?.to_string();
    losses::objective(&objective).map_err(|e| Error::Config(format!("train.objective: {e}")))?;
    let c = TrainConfig {
        model: ModelSpec {
            hidden: cfg.usize("model.hidden")?,
            d_emb: cfg.usize("model.embedding")?,
            parts: cfg.usize("model.parts")?,
            norm,
            eps: cfg.f64("model.eps")?,
            bn_momentum: cfg.f64("model.bn_momentum")?,
        },
        batch: BatchSpec::new(pk)?,
        triplet: TripletConfig {
            margin: cfg.f64("train.margin")?,
            mining,
        },
        objective,
        weights: DomainWeights::new(weights)?,
        schedule: LrSchedule::new(
            cfg.f64("train.lr")?,
            Config::list("train.decay_steps", cfg.str("train.decay_steps")?)?,
            cfg.f64("train.decay_factor")?,
            cfg.usize("train.steps")?,
        )?,
        momentum: cfg.f64("train.momentum")?,
        weight_decay: cfg.f64("train.weight_decay")?,
        seed,
        eval_every: cfg.usize("train.eval_every")?,
        gallery_per_identity: cfg.usize("eval.gallery_per_identity")?,
    };
    c.validate(store)?;
    Ok(c)
}

/// Removal strategy for domain `d`; `mode_override` (from the command line)
/// beats the section-wide `distill.mode` but not a per-domain key.
pub fn distill_mode(cfg: &Config, d: DomainId, mode_override: Option<&str>) -> Result<String> {
    let key = format!("distill.domain{}.mode", d.0);
    Ok(match (cfg.values.get(&key), mode_override) {
        (Some(v), _) => v.clone(),
        (None, Some(m)) => m.to_string(),
        (None, None) => cfg.str("distill.mode")?.to_string(),
    })
}

/// Pruning plan over `distill.domains` (default: the training domains).
pub fn prune_plan(
    cfg: &Config,
    train: &TrainConfig,
    mode_override: Option<&str>,
    fraction: Option<f64>,
) -> Result<PrunePlan> {
    let domains = cfg
        .domain_list("distill.domains")?
        .unwrap_or_else(|| train.train_domains());
    let modes = domains
        .iter()
        .map(|&d| Ok((d, distill_mode(cfg, d, mode_override)?)))
        .collect::<Result<_>>()?;
    Ok(PrunePlan {
        fraction: match fraction {
            Some(f) => f,
            None => cfg.f64("distill.fraction")?,
        },
        modes,
        pretrain_steps: cfg.usize("distill.pretrain_steps")?,
    })
}

/// `compare.seeds` consecutive seeds starting at `seed`.
pub fn comparison_seeds(cfg: &Config, seed: u64) -> Result<Vec<u64>> {
    let n = cfg.usize("compare.seeds")?;
    if n == 0 {
        return Err(Error::Config("compare.seeds must be positive".into()));
    }
    Ok((0..n as u64).map(|i| seed + i).collect())
}

/// Expands grid axes such as `dsbn=off,on setri=off,on` into the cartesian
/// product of variants. Axes: `dsbn` (off|on), `setri` (off|on: naive or
/// separate triplet) and `distill` (off | on | redundancy | noise | random;
/// `on` uses the configured per-domain modes).
pub fn parse_grid(axes: &[String], cfg: &Config, train: &TrainConfig) -> Result<Vec<Variant>> {
    let mut variants = vec![Variant::named("")];
    for axis in axes {
        let (name, values) = axis
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid axis `{axis}` is not `name=v1,v2`")))?;
        let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::Config(format!("grid axis `{name}` has no values")));
        }
        let mut next = Vec::new();
        for v in &variants {
            for &val in &values {
                let mut w = v.clone();
                match (name, val) {
                    ("dsbn", "off") => w.norm = Some(NormMode::Single),
                    ("dsbn", "on") => w.norm = Some(NormMode::Dsbn),
                    ("setri", "off") => w.objective = Some("naive".into()),
                    ("setri", "on") => w.objective = Some("separate".into()),
                    ("distill", "off") => w.prune = None,
                    ("distill", "on") => w.prune = Some(prune_plan(cfg, train, None, None)?),
                    ("distill", m @ ("redundancy" | "noise" | "random")) => {
                        w.prune = Some(prune_plan(cfg, train, Some(m), None)?);
                        // a command-line style override must reach every domain
                        for mode in w.prune.as_mut().unwrap().modes.values_mut() {
                            *mode = m.to_string();
                        }
                    }
                    _ => return Err(Error::Config(format!("unknown grid value `{name}={val}`"))),
                }
                let tag = format!("{name}={val}");
                w.name = if w.name.is_empty() {
                    tag
                } else {
                    format!("{} {tag}", w.name)
                };
                next.push(w);
            }
        }
        variants = next;
    }
    if variants.len() == 1 && variants[0].name.is_empty() {
        variants[0].name = "base".into();
    }
    Ok(variants)
}
