//! Desk-scale embedding network with hand-derived gradients.
//!
//! ```text
//! x ─ W1,b1 ─ BN (single or one branch per domain) ─ ReLU ─ W2,b2 ─ embedding
//!                                                                    │
//!                               p contiguous slices ─ head_j ─ part logits
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::types::{DomainId, IdentityId, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// One BN shared by all domains.
    Single,
    /// One BN branch per training domain.
    Dsbn,
}

impl FromStr for NormMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "off" => Ok(NormMode::Single),
            "dsbn" | "on" => Ok(NormMode::Dsbn),
            _ => Err(Error::invalid(format!(
                "unknown norm mode '{s}' (expected single or dsbn)"
            ))),
        }
    }
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormMode::Single => "single",
            NormMode::Dsbn => "dsbn",
        })
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyper {
    pub d_in: usize,
    pub hidden: usize,
    pub d_emb: usize,
    pub parts: usize,
    pub norm: NormMode,
    pub eps: f64,
    pub bn_momentum: f64,
}

impl Hyper {
    pub fn new(d_in: usize) -> Self {
        Self {
            d_in,
            hidden: 32,
            d_emb: 16,
            parts: 2,
            norm: NormMode::Single,
            eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.hidden == 0 || self.d_emb == 0 || self.parts == 0 {
            return Err(Error::invalid("network dimensions must be positive"));
        }
        if !self.d_emb.is_multiple_of(self.parts) {
            return Err(Error::invalid(format!(
                "{} parts do not divide embedding size {}",
                self.parts, self.d_emb
            )));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::invalid("BN momentum must lie in (0, 1]"));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::invalid("BN eps must be positive"));
        }
        Ok(())
    }

    pub fn segment(&self) -> usize {
        self.d_emb / self.parts
    }
}

/// Learnable parameters. The same layout doubles as a gradient or velocity buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub gamma: Vec<Array1<f64>>,
    pub beta: Vec<Array1<f64>>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub head_w: Vec<Array2<f64>>,
    pub head_b: Vec<Array1<f64>>,
}

impl Params {
    pub fn zeros_like(&self) -> Self {
        let z1 = |a: &Array1<f64>| Array1::zeros(a.raw_dim());
        let z2 = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        Self {
            w1: z2(&self.w1),
            b1: z1(&self.b1),
            gamma: self.gamma.iter().map(z1).collect(),
            beta: self.beta.iter().map(z1).collect(),
            w2: z2(&self.w2),
            b2: z1(&self.b2),
            head_w: self.head_w.iter().map(z2).collect(),
            head_b: self.head_b.iter().map(z1).collect(),
        }
    }

    /// Named flat views in a fixed order (also the checkpoint block order).
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("w1".into(), self.w1.as_slice().unwrap()),
            ("b1".into(), self.b1.as_slice().unwrap()),
        ];
        for (k, (g, b)) in self.gamma.iter().zip(&self.beta).enumerate() {
            out.push((format!("gamma{k}"), g.as_slice().unwrap()));
            out.push((format!("beta{k}"), b.as_slice().unwrap()));
        }
        out.push(("w2".into(), self.w2.as_slice().unwrap()));
        out.push(("b2".into(), self.b2.as_slice().unwrap()));
        for (j, (w, b)) in self.head_w.iter().zip(&self.head_b).enumerate() {
            out.push((format!("head_w{j}"), w.as_slice().unwrap()));
            out.push((format!("head_b{j}"), b.as_slice().unwrap()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.w1.as_slice_mut().unwrap(), self.b1.as_slice_mut().unwrap()];
        for (g, b) in self.gamma.iter_mut().zip(self.beta.iter_mut()) {
            out.push(g.as_slice_mut().unwrap());
            out.push(b.as_slice_mut().unwrap());
        }
        out.push(self.w2.as_slice_mut().unwrap());
        out.push(self.b2.as_slice_mut().unwrap());
        for (w, b) in self.head_w.iter_mut().zip(self.head_b.iter_mut()) {
            out.push(w.as_slice_mut().unwrap());
            out.push(b.as_slice_mut().unwrap());
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, t)| t.iter().copied())
            .collect()
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

impl RunningStats {
    pub fn new(width: usize) -> Self {
        Self {
            mean: Array1::zeros(width),
            var: Array1::ones(width),
        }
    }
}

/// Normalization configuration and running statistics. Affine parameters
/// (γ, β) live in [`Params`] alongside the other learnables.
#[derive(Debug, Clone, PartialEq)]
pub struct NormState {
    pub mode: NormMode,
    pub momentum: f64,
    pub eps: f64,
    /// Domain served by each branch; empty for [`NormMode::Single`].
    pub branch_domains: Vec<DomainId>,
    pub stats: Vec<RunningStats>,
}

impl NormState {
    pub fn n_branches(&self) -> usize {
        self.stats.len()
    }

    /// Branch that normalizes `domain` during training.
    pub fn branch_of(&self, domain: DomainId) -> Option<usize> {
        match self.mode {
            NormMode::Single => Some(0),
            NormMode::Dsbn => self.branch_domains.iter().position(|&d| d == domain),
        }
    }
}

/// Intermediates of one training-mode BN call.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// A DSBN branch's training call: (branch, batch rows routed to it, cache).
pub type BranchCache = (usize, Vec<usize>, BnCache);

/// Training-mode BN: standardize by batch mean and biased variance, then fold
/// the batch statistics into `stats` (unbiased variance for the running estimate).
pub fn bn_forward_train(
    x: ArrayView2<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
    stats: &mut RunningStats,
    eps: f64,
    momentum: f64,
) -> (Array2<f64>, BnCache) {
    let n = x.nrows() as f64;
    let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
    let centered = &x - &mean;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
    let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
    let xhat = &centered * &inv_std;
    let y = &xhat * &gamma + &beta;

    let unbiased = &var * (n / (n - 1.0));
    stats.mean = &stats.mean * (1.0 - momentum) + &mean * momentum;
    stats.var = &stats.var * (1.0 - momentum) + &unbiased * momentum;
    (y, BnCache { xhat, inv_std })
}

pub fn bn_forward_infer(
    x: ArrayView2<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
    stats: &RunningStats,
    eps: f64,
) -> Array2<f64> {
    let inv_std = stats.var.mapv(|v| 1.0 / (v + eps).sqrt());
    (&x - &stats.mean) * &inv_std * &gamma + &beta
}

/// Returns (dx, dγ, dβ) for a training-mode BN call, including the
/// dependence of the batch statistics on every input row.
pub fn bn_backward(
    cache: &BnCache,
    gamma: ArrayView1<f64>,
    dy: ArrayView2<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let n = dy.nrows() as f64;
    let dbeta = dy.sum_axis(Axis(0));
    let dgamma = (&dy * &cache.xhat).sum_axis(Axis(0));
    let dxhat = &dy * &gamma;
    let mean_dxhat = dxhat.sum_axis(Axis(0)) / n;
    let mean_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0)) / n;
    let dx = (&dxhat - &mean_dxhat - &(&cache.xhat * &mean_dxhat_xhat)) * &cache.inv_std;
    (dx, dgamma, dbeta)
}

/// How inference normalizes activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferenceNorm {
    /// Use the branch trained on this domain.
    Branch(DomainId),
    /// Apply every branch and average the outputs.
    Average,
}

impl fmt::Display for InferenceNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InferenceNorm::Branch(d) => write!(f, "branch{d}"),
            InferenceNorm::Average => f.write_str("average"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    Train,
    Infer(InferenceNorm),
}

/// Everything `backward` needs from a training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    training: bool,
    x: Array2<f64>,
    routes: Vec<BranchCache>,
    normed: Array2<f64>,
    hidden: Array2<f64>,
    embeddings: Array2<f64>,
}

impl ForwardCache {
    /// ReLU gate pattern (pre-activation > 0), row-major.
    pub fn relu_mask(&self) -> Vec<bool> {
        self.normed.iter().map(|&v| v > 0.0).collect()
    }

    /// Normalized, pre-ReLU activations.
    pub fn normalized(&self) -> &Array2<f64> {
        &self.normed
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// batch × d_emb
    pub embeddings: Array2<f64>,
    /// batch × parts × classes
    pub part_logits: Array3<f64>,
    pub cache: ForwardCache,
}

/// Full network state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub hyper: Hyper,
    pub params: Params,
    pub norm: NormState,
    /// First global class index of each training domain, with its class count.
    pub classes: BTreeMap<DomainId, (usize, usize)>,
    version: u64,
}

impl ModelState {
    /// Random initialization. `class_counts` lists the training domains and
    /// the number of identity classes in each; the classifier space is their
    /// concatenation in ascending domain order.
    pub fn init(hyper: Hyper, class_counts: &BTreeMap<DomainId, usize>, rng: &mut Rng) -> Result<Self> {
        hyper.validate()?;
        if class_counts.is_empty() {
            return Err(Error::invalid("model needs at least one training domain"));
        }
        let mut classes = BTreeMap::new();
        let mut offset = 0;
        for (&d, &c) in class_counts {
            classes.insert(d, (offset, c));
            offset += c;
        }
        let n_classes = offset;
        if n_classes == 0 {
            return Err(Error::invalid("model needs at least one class"));
        }
        let (branch_domains, n_branches) = match hyper.norm {
            NormMode::Single => (Vec::new(), 1),
            NormMode::Dsbn => (class_counts.keys().copied().collect::<Vec<_>>(), class_counts.len()),
        };
        let h = hyper.hidden;
        let seg = hyper.segment();
        let std1 = (2.0 / hyper.d_in as f64).sqrt();
        let std2 = (1.0 / h as f64).sqrt();
        let std_head = (1.0 / seg as f64).sqrt();
        let w1 = Array2::from_shape_fn((hyper.d_in, h), |_| rng.normal(0.0, std1));
        let w2 = Array2::from_shape_fn((h, hyper.d_emb), |_| rng.normal(0.0, std2));
        let head_w = (0..hyper.parts)
            .map(|_| Array2::from_shape_fn((seg, n_classes), |_| rng.normal(0.0, std_head)))
            .collect();
        let params = Params {
            w1,
            b1: Array1::zeros(h),
            gamma: vec![Array1::ones(h); n_branches],
            beta: vec![Array1::zeros(h); n_branches],
            w2,
            b2: Array1::zeros(hyper.d_emb),
            head_w,
            head_b: vec![Array1::zeros(n_classes); hyper.parts],
        };
        let norm = NormState {
            mode: hyper.norm,
            momentum: hyper.bn_momentum,
            eps: hyper.eps,
            branch_domains,
            stats: vec![RunningStats::new(h); n_branches],
        };
        Ok(Self {
            hyper,
            params,
            norm,
            classes,
            version: 0,
        })
    }

    /// Reassembles a model from stored parts (checkpoint loading).
    pub fn from_parts(
        hyper: Hyper,
        params: Params,
        norm: NormState,
        classes: BTreeMap<DomainId, (usize, usize)>,
    ) -> Result<Self> {
        hyper.validate()?;
        let m = Self {
            hyper,
            params,
            norm,
            classes,
            version: 0,
        };
        m.check_shapes()?;
        Ok(m)
    }

    fn check_shapes(&self) -> Result<()> {
        let h = &self.hyper;
        let nb = self.norm.n_branches();
        let c = self.n_classes();
        let p = &self.params;
        let ok = p.w1.dim() == (h.d_in, h.hidden)
            && p.b1.len() == h.hidden
            && p.gamma.len() == nb
            && p.beta.len() == nb
            && p.gamma.iter().chain(&p.beta).all(|v| v.len() == h.hidden)
            && self
                .norm
                .stats
                .iter()
                .all(|s| s.mean.len() == h.hidden && s.var.len() == h.hidden)
            && p.w2.dim() == (h.hidden, h.d_emb)
            && p.b2.len() == h.d_emb
            && p.head_w.len() == h.parts
            && p.head_b.len() == h.parts
            && p.head_w.iter().all(|w| w.dim() == (h.segment(), c))
            && p.head_b.iter().all(|b| b.len() == c)
            && match self.norm.mode {
                NormMode::Single => nb == 1,
                NormMode::Dsbn => nb == self.norm.branch_domains.len() && nb >= 1,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(
                "model parameter shapes are inconsistent with its hyperparameters",
            ))
        }
    }

    pub fn n_classes(&self) -> usize {
        self.classes.values().map(|&(_, c)| c).sum()
    }

    pub fn training_domains(&self) -> Vec<DomainId> {
        self.classes.keys().copied().collect()
    }

    pub fn class_of(&self, identity: IdentityId) -> Option<usize> {
        let &(offset, count) = self.classes.get(&identity.domain)?;
        ((identity.label as usize) < count).then_some(offset + identity.label as usize)
    }

    /// Inverse of [`class_of`](Self::class_of).
    pub fn identity_of_class(&self, class: usize) -> Option<IdentityId> {
        self.classes
            .iter()
            .find(|(_, &(o, c))| class >= o && class < o + c)
            .map(|(&d, &(o, _))| IdentityId {
                domain: d,
                label: (class - o) as u32,
            })
    }

    /// Bumped on every parameter change; caches from older versions are stale.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn params_mut(&mut self) -> &mut Params {
        self.version += 1;
        &mut self.params
    }

    /// Inference norm used for samples of `domain`: its own branch when the
    /// model has one, output averaging otherwise.
    pub fn default_inference(&self, domain: DomainId) -> InferenceNorm {
        match self.norm.mode {
            NormMode::Single => InferenceNorm::Branch(domain),
            NormMode::Dsbn if self.norm.branch_of(domain).is_some() => InferenceNorm::Branch(domain),
            NormMode::Dsbn => InferenceNorm::Average,
        }
    }

    /// Single-branch BN on a batch routed to the branch of `domain`.
    pub fn bn_forward(&mut self, x: ArrayView2<f64>, domain: DomainId, training: bool) -> Result<Array2<f64>> {
        let k = self.branch_for(domain)?;
        if training {
            if x.nrows() < 2 {
                return Err(Error::DegenerateBatch {
                    domain,
                    size: x.nrows(),
                });
            }
            let (y, _) = bn_forward_train(
                x,
                self.params.gamma[k].view(),
                self.params.beta[k].view(),
                &mut self.norm.stats[k],
                self.norm.eps,
                self.norm.momentum,
            );
            Ok(y)
        } else {
            Ok(self.branch_infer(x, k))
        }
    }

    fn branch_for(&self, domain: DomainId) -> Result<usize> {
        self.norm
            .branch_of(domain)
            .ok_or_else(|| Error::invalid(format!("no normalization branch for domain {domain}")))
    }

    fn branch_infer(&self, x: ArrayView2<f64>, k: usize) -> Array2<f64> {
        bn_forward_infer(
            x,
            self.params.gamma[k].view(),
            self.params.beta[k].view(),
            &self.norm.stats[k],
            self.norm.eps,
        )
    }

    /// Training-mode routing: each row is normalized by its domain's branch,
    /// and each branch's statistics come from its own rows only.
    pub fn dsbn_route(&mut self, x: ArrayView2<f64>, domains: &[DomainId]) -> Result<Array2<f64>> {
        let (y, _) = self.route_train(x, domains)?;
        Ok(y)
    }

    fn route_train(&mut self, x: ArrayView2<f64>, domains: &[DomainId]) -> Result<(Array2<f64>, Vec<BranchCache>)> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &d) in domains.iter().enumerate() {
            groups.entry(self.branch_for(d)?).or_default().push(i);
        }
        let mut y = Array2::zeros(x.raw_dim());
        let mut routes = Vec::with_capacity(groups.len());
        for (k, rows) in groups {
            if rows.len() < 2 {
                return Err(Error::DegenerateBatch {
                    domain: domains[rows[0]],
                    size: rows.len(),
                });
            }
            let sub = x.select(Axis(0), &rows);
            let (out, cache) = bn_forward_train(
                sub.view(),
                self.params.gamma[k].view(),
                self.params.beta[k].view(),
                &mut self.norm.stats[k],
                self.norm.eps,
                self.norm.momentum,
            );
            for (r, &i) in rows.iter().enumerate() {
                y.row_mut(i).assign(&out.row(r));
            }
            routes.push((k, rows, cache));
        }
        Ok((y, routes))
    }

    /// Output-averaging inference: every branch normalizes `x` with its running
    /// statistics and affine parameters, and the outputs are averaged.
    pub fn dsbn_average_inference(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let n = self.norm.n_branches();
        let mut acc = Array2::zeros(x.raw_dim());
        for k in 0..n {
            acc += &self.branch_infer(x, k);
        }
        acc / n as f64
    }

    fn normalize_infer(&self, z: ArrayView2<f64>, norm: InferenceNorm) -> Result<Array2<f64>> {
        match norm {
            InferenceNorm::Branch(d) => Ok(self.branch_infer(z, self.branch_for(d)?)),
            InferenceNorm::Average => Ok(self.dsbn_average_inference(z)),
        }
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.hyper.d_in {
            return Err(Error::invalid(format!(
                "input has {} features, model expects {}",
                x.ncols(),
                self.hyper.d_in
            )));
        }
        Ok(())
    }

    /// Post-linear (pre-normalization) activations `x·W1 + b1`.
    pub fn linear1(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        Ok(x.dot(&self.params.w1) + &self.params.b1)
    }

    fn head(&self, hidden: &Array2<f64>) -> (Array2<f64>, Array3<f64>) {
        let emb = hidden.dot(&self.params.w2) + &self.params.b2;
        let seg = self.hyper.segment();
        let c = self.n_classes();
        let mut logits = Array3::zeros((emb.nrows(), self.hyper.parts, c));
        for j in 0..self.hyper.parts {
            let part = emb.slice(s![.., j * seg..(j + 1) * seg]);
            let l = part.dot(&self.params.head_w[j]) + &self.params.head_b[j];
            logits.slice_mut(s![.., j, ..]).assign(&l);
        }
        (emb, logits)
    }

    /// Forward pass. Training mode uses batch statistics (and updates the
    /// running ones); inference uses running statistics only.
    pub fn forward(&mut self, x: ArrayView2<f64>, domains: &[DomainId], pass: Pass) -> Result<ForwardOutput> {
        if domains.len() != x.nrows() {
            return Err(Error::invalid("one domain per input row is required"));
        }
        let z = self.linear1(x)?;
        let (normed, routes, training) = match pass {
            Pass::Train => {
                let (y, routes) = self.route_train(z.view(), domains)?;
                (y, routes, true)
            }
            Pass::Infer(norm) => (self.normalize_infer(z.view(), norm)?, Vec::new(), false),
        };
        let hidden = normed.mapv(|v| v.max(0.0));
        let (embeddings, part_logits) = self.head(&hidden);
        Ok(ForwardOutput {
            embeddings: embeddings.clone(),
            part_logits,
            cache: ForwardCache {
                version: self.version,
                training,
                x: x.to_owned(),
                routes,
                normed,
                hidden,
                embeddings,
            },
        })
    }

    /// Read-only inference returning (embeddings, part logits).
    pub fn infer(&self, x: ArrayView2<f64>, norm: InferenceNorm) -> Result<(Array2<f64>, Array3<f64>)> {
        let z = self.linear1(x)?;
        let normed = self.normalize_infer(z.view(), norm)?;
        Ok(self.head(&normed.mapv(|v| v.max(0.0))))
    }

    /// Embeds samples, each under [`default_inference`](Self::default_inference)
    /// for its domain unless `norm` overrides it.
    pub fn embed_samples(
        &self,
        samples: &[&Sample],
        norm: Option<InferenceNorm>,
    ) -> Result<(Array2<f64>, Array3<f64>)> {
        let c = self.n_classes();
        let mut emb = Array2::zeros((samples.len(), self.hyper.d_emb));
        let mut logits = Array3::zeros((samples.len(), self.hyper.parts, c));
        let mut groups: BTreeMap<(u8, u32), (InferenceNorm, Vec<usize>)> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            let n = norm.unwrap_or_else(|| self.default_inference(s.domain()));
            let key = match n {
                InferenceNorm::Branch(d) => (0, d.0),
                InferenceNorm::Average => (1, 0),
            };
            groups.entry(key).or_insert((n, Vec::new())).1.push(i);
        }
        for (_, (n, rows)) in groups {
            let x = Array2::from_shape_fn((rows.len(), self.hyper.d_in), |(r, k)| samples[rows[r]].signature[k]);
            let (e, l) = self.infer(x.view(), n)?;
            for (r, &i) in rows.iter().enumerate() {
                emb.row_mut(i).assign(&e.row(r));
                logits.slice_mut(s![i, .., ..]).assign(&l.slice(s![r, .., ..]));
            }
        }
        Ok((emb, logits))
    }

    /// Reverse-mode gradients of a scalar loss whose partials w.r.t. the
    /// embeddings and part logits of `cache` are given.
    pub fn backward(&self, cache: &ForwardCache, grad_emb: &Array2<f64>, grad_logits: &Array3<f64>) -> Result<Params> {
        if !cache.training {
            return Err(Error::InvalidState(
                "backward needs a training-mode forward cache".into(),
            ));
        }
        if cache.version != self.version {
            return Err(Error::InvalidState(format!(
                "stale forward cache (model version {}, cache version {})",
                self.version, cache.version
            )));
        }
        let b = cache.x.nrows();
        let h = &self.hyper;
        if grad_emb.dim() != (b, h.d_emb) || grad_logits.dim() != (b, h.parts, self.n_classes()) {
            return Err(Error::invalid("upstream gradient shapes do not match the forward pass"));
        }
        let p = &self.params;
        let mut g = p.zeros_like();
        let seg = h.segment();

        let mut d_emb = grad_emb.clone();
        for j in 0..h.parts {
            let dl = grad_logits.slice(s![.., j, ..]);
            let part = cache.embeddings.slice(s![.., j * seg..(j + 1) * seg]);
            g.head_w[j] = part.t().dot(&dl);
            g.head_b[j] = dl.sum_axis(Axis(0));
            let mut de = d_emb.slice_mut(s![.., j * seg..(j + 1) * seg]);
            de += &dl.dot(&p.head_w[j].t());
        }

        g.w2 = cache.hidden.t().dot(&d_emb);
        g.b2 = d_emb.sum_axis(Axis(0));
        let d_hidden = d_emb.dot(&p.w2.t());
        let d_normed = ndarray::Zip::from(&d_hidden)
            .and(&cache.normed)
            .map_collect(|&dh, &n| if n > 0.0 { dh } else { 0.0 });

        let mut d_z = Array2::zeros(d_normed.raw_dim());
        for (k, rows, bn) in &cache.routes {
            let dy = d_normed.select(Axis(0), rows);
            let (dx, dgamma, dbeta) = bn_backward(bn, p.gamma[*k].view(), dy.view());
            g.gamma[*k] = dgamma;
            g.beta[*k] = dbeta;
            for (r, &i) in rows.iter().enumerate() {
                d_z.row_mut(i).assign(&dx.row(r));
            }
        }
        g.w1 = cache.x.t().dot(&d_z);
        g.b1 = d_z.sum_axis(Axis(0));
        Ok(g)
    }

    /// SGD with momentum and decoupled-into-gradient weight decay:
    /// `v ← μ·v − lr·(g + λ·θ)`, `θ ← θ + v`.
    pub fn sgd_step(&mut self, velocity: &mut Params, grads: &Params, lr: f64, momentum: f64, weight_decay: f64) {
        let params = self.params_mut();
        for ((theta, v), g) in params
            .tensors_mut()
            .into_iter()
            .zip(velocity.tensors_mut())
            .zip(grads.tensors().into_iter().map(|(_, t)| t))
        {
            for i in 0..theta.len() {
                v[i] = momentum * v[i] - lr * (g[i] + weight_decay * theta[i]);
                theta[i] += v[i];
            }
        }
    }

    /// Arg-max class per part (lowest class index on ties).
    pub fn part_predictions(logits: &Array3<f64>) -> Vec<Vec<usize>> {
        let (b, p, _) = logits.dim();
        (0..b)
            .map(|i| {
                (0..p)
                    .map(|j| {
                        let row = logits.slice(s![i, j, ..]);
                        let mut best = 0;
                        for (k, &v) in row.iter().enumerate() {
                            if v > row[best] {
                                best = k;
                            }
                        }
                        best
                    })
                    .collect()
            })
            .collect()
    }
}

/// Stacks sample signatures into a batch matrix.
pub fn signature_matrix(samples: &[&Sample]) -> Array2<f64> {
    let d = samples.first().map_or(0, |s| s.signature.len());
    Array2::from_shape_fn((samples.len(), d), |(i, k)| samples[i].signature[k])
}
