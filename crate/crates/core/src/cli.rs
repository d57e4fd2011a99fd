//! Command-line surface: `gen`, `train`, `distill`, `eval`, `affinity` and
//! `compare`. Every subcommand takes `--seed`; identical invocations write
//! byte-identical files. Exit code 0 on success, 1 for user errors (bad
//! flags, files or configs), 2 for internal failures such as divergence.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::affinity::{affinity_accuracy_correlation, high_level_affinity, low_level_affinity};
use crate::config::{self, Config};
use crate::distill::{self, DistillPolicy, SampleScores};
use crate::error::{Error, Result};
use crate::formats::{self, real};
use crate::net::ModelState;
use crate::rng::Rng;
use crate::synth::generate;
use crate::trainer::{evaluate, run_comparison, train, transfer_matrix};
use crate::types::{DomainId, FeatureStore};

#[derive(Debug, Parser)]
#[command(name = "gaitmix", version, about = "Mixed-dataset metric learning toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-domain feature file.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output feature file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes model.ckpt, report.csv, loss.csv and config.cfg.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score and prune a feature file; writes one report per domain and
    /// retained.csv.
    Distill {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Scoring model (not needed when every domain uses random removal).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// redundancy | noise | random (per-domain config keys take precedence).
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank-1 of a trained model on every domain of a feature file.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output table (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Domain affinity matrices; with --transfer also the cross-domain rank-1
    /// matrix and its correlation with each affinity.
    Affinity {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Model for the high-level matrix.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Train one model per domain and correlate transfer with affinity.
        #[arg(long)]
        transfer: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every grid variant under several seeds and tabulate rank-1.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Feature file; generated from the config's synth section when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Grid axes, e.g. `--grid dsbn=off,on setri=off,on`.
        #[arg(long, num_args = 1..)]
        grid: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output table (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let line = msg
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments");
            eprintln!("{}", line.trim());
            return 1;
        }
    };
    match execute(&cli.command) {
        Ok(summary) => {
            print!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            if e.is_user_error() {
                1
            } else {
                2
            }
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::new()),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::NotFound(format!("{}: {e}", path.display())))
}

fn load_features(path: &Path) -> Result<FeatureStore> {
    formats::parse_features(&read(path)?, &path.display().to_string())
}

fn load_checkpoint(path: &Path) -> Result<ModelState> {
    formats::parse_checkpoint(&read(path)?, &path.display().to_string())
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<String> {
    match path {
        Some(p) => {
            write(p, text)?;
            Ok(format!("wrote {}\n", p.display()))
        }
        None => Ok(text.to_string()),
    }
}

/// Runs one subcommand; returns the text for standard output.
pub fn execute(cmd: &Command) -> Result<String> {
    match cmd {
        Command::Gen { config, seed, out } => {
            let cfg = load_config(config.as_deref())?;
            let store = generate(&config::recipes(&cfg)?, *seed)?;
            write(out, &formats::write_features(&store))?;
            Ok(format!(
                "wrote {} samples over {} domains to {}\n",
                store.len(),
                store.domains().len(),
                out.display()
            ))
        }
        Command::Train {
            config,
            data,
            seed,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let store = load_features(data)?;
            let tc = config::train_config(&cfg, &store, *seed)?;
            let (model, report) = train(&store, &tc)?;
            fs::create_dir_all(out)?;
            write(&out.join("model.ckpt"), &formats::write_checkpoint(&model))?;
            write(&out.join("report.csv"), &report.eval_csv())?;
            write(&out.join("loss.csv"), &report.loss_csv())?;
            write(&out.join("config.cfg"), &tc.to_config_text())?;
            Ok(report.summary())
        }
        Command::Distill {
            config,
            data,
            checkpoint,
            mode,
            fraction,
            seed,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let store = load_features(data)?;
            let fraction = match fraction {
                Some(f) => *f,
                None => cfg.f64("distill.fraction")?,
            };
            let model = checkpoint.as_deref().map(load_checkpoint).transpose()?;
            // default: the scoring model's training domains (part predictions
            // only exist for them), or every domain without a model
            let domains = match (cfg.domain_list("distill.domains")?, &model) {
                (Some(d), _) => d,
                (None, Some(m)) => {
                    let present: BTreeSet<DomainId> = store.domains().into_iter().collect();
                    m.training_domains()
                        .into_iter()
                        .filter(|d| present.contains(d))
                        .collect()
                }
                (None, None) => store.domains(),
            };
            fs::create_dir_all(out)?;
            let mut removed = BTreeSet::new();
            let mut summary = String::new();
            for d in domains {
                let m = config::distill_mode(&cfg, d, mode.as_deref())?;
                let policy = DistillPolicy::new(&m, fraction)?.with_seed(Rng::stream(*seed, d.0 as u64).next_u64());
                let sub = store.domain_subset(&[d]);
                if sub.is_empty() {
                    return Err(Error::invalid(format!(
                        "domain {d} has no samples in {}",
                        data.display()
                    )));
                }
                let report = match (&model, m.as_str()) {
                    (Some(model), _) => distill::distill(&sub, model, &policy)?,
                    (None, "random") => {
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
                    }
                    (None, _) => {
                        return Err(Error::invalid(format!("mode `{m}` needs --checkpoint")));
                    }
                };
                let _ = writeln!(
                    summary,
                    "domain {d}: {m} removed {} of {} (shortfall {})",
                    report.removed_ids.len(),
                    sub.len(),
                    report.shortfall
                );
                write(
                    &out.join(format!("distill_d{}.csv", d.0)),
                    &formats::write_distill_report(&report),
                )?;
                removed.extend(report.removed_ids);
            }
            let retained = store.filter(|s| !removed.contains(&s.id));
            write(&out.join("retained.csv"), &formats::write_features(&retained))?;
            let _ = writeln!(summary, "retained {} of {} samples", retained.len(), store.len());
            Ok(summary)
        }
        Command::Eval {
            config,
            data,
            checkpoint,
            seed: _,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let store = load_features(data)?;
            let model = load_checkpoint(checkpoint)?;
            let g = cfg.usize("eval.gallery_per_identity")?;
            let records = evaluate(&model, &store, g, 0)?;
            let mut text = String::new();
            let _ = writeln!(text, "{}", formats::EVAL_VERSION);
            let _ = writeln!(text, "#gallery_per_identity={g}");
            let _ = writeln!(text, "domain,seen,inference,rank1,probes");
            for r in &records {
                let _ = writeln!(
                    text,
                    "{},{},{},{},{}",
                    r.domain.0,
                    r.seen as u8,
                    r.inference,
                    real(r.rank1),
                    r.probes
                );
            }
            write_or_print(out.as_deref(), &text)
        }
        Command::Affinity {
            config,
            data,
            checkpoint,
            transfer,
            seed,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let store = load_features(data)?;
            fs::create_dir_all(out)?;
            let low = low_level_affinity(&store)?;
            write(&out.join("affinity_low.csv"), &low.to_text())?;
            let mut matrices = vec![low];
            if let Some(p) = checkpoint {
                let high = high_level_affinity(&store, &load_checkpoint(p)?)?;
                write(&out.join("affinity_high.csv"), &high.to_text())?;
                matrices.push(high);
            }
            let mut summary = String::new();
            for m in &matrices {
                let _ = writeln!(summary, "{} (cosine):\n{}", m.level, m.values);
            }
            if *transfer {
                let domains: Vec<DomainId> = store.domains();
                let base = config::train_config(&cfg, &store, *seed)?;
                let t = transfer_matrix(&store, &base, &domains)?;
                let mut meta = vec![("quantity", "rank1 (row: train domain, column: test domain)".to_string())];
                for m in &matrices {
                    let r = affinity_accuracy_correlation(m, &t)?;
                    meta.push((
                        if m.level.to_string() == "low" {
                            "corr_low"
                        } else {
                            "corr_high"
                        },
                        real(r),
                    ));
                    let _ = writeln!(summary, "correlation with {} affinity: {r:.4}", m.level);
                }
                write(
                    &out.join("transfer.csv"),
                    &formats::write_matrix(formats::AFFINITY_VERSION, &meta, &domains, &t),
                )?;
            }
            Ok(summary)
        }
        Command::Compare {
            config,
            data,
            grid,
            seed,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let store = match data {
                Some(p) => load_features(p)?,
                None => generate(&config::recipes(&cfg)?, *seed)?,
            };
            let base = config::train_config(&cfg, &store, *seed)?;
            let variants = config::parse_grid(grid, &cfg, &base)?;
            let seeds = config::comparison_seeds(&cfg, *seed)?;
            let cmp = run_comparison(&variants, &store, &base, &seeds)?;
            let written = write_or_print(out.as_deref(), &cmp.to_csv())?;
            Ok(if out.is_some() {
                format!("{}{written}", cmp.summary())
            } else {
                written
            })
        }
    }
}
