//! Mixed-dataset metric learning for gait-style signatures.
//!
//! The crate bundles the pieces needed to train one embedding model on
//! several source datasets at once and measure how it transfers:
//!
//! * [`synth`] generates labelled multi-domain data with injected
//!   near-duplicates and outliers;
//! * [`distill`] scores samples by mean negative distance, distance to the
//!   identity centroid and part-level prediction failures, then prunes them;
//! * [`losses`] holds the per-domain ("separate") triplet loss, its naive
//!   counterpart and the unified cross-entropy;
//! * [`net`] is a small MLP with plain or domain-specific batch normalization
//!   and hand-written backward passes;
//! * [`sampler`], [`trainer`] and [`affinity`] drive experiments;
//! * [`config`], [`formats`] and [`cli`] expose everything as text files and a
//!   command-line tool.

pub mod affinity;
pub mod cli;
pub mod config;
pub mod distill;
pub mod error;
pub mod formats;
pub mod losses;
pub mod net;
pub mod registry;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use rng::Rng;
pub use types::{euclidean, DomainId, FeatureStore, Flag, IdentityId, Sample};
