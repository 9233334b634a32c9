//! Command-line front end: parses flags, runs one experiment and writes its
//! tables, round logs and checkpoints into the output directory.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use raf_core::experiments::{self, RunLog};
use raf_core::federated::write_round_logs;
use raf_core::io::{config_hash, header_comment, save_checkpoint};
use raf_core::{Error, ExperimentConfig, ExperimentKind};
use serde::Serialize;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "raf", version, about = "Resolution-adaptive federated keypoint regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: Opts,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Opts {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: the configured one, else `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for client training and evaluation.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub workers: u64,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Low-resolution accuracy per row of client resolutions.
    Drift,
    /// Base and RAF under FedAvg and FedProx over the evaluation sweep.
    Compare,
    /// Inference on upscaled low-resolution images.
    Interp,
    /// One high-resolution client joined by more low-resolution clients.
    Scaling,
    /// Convergence constants and rate on the linear surrogate.
    Theory,
    /// Pooled feature embeddings of Base and RAF models.
    Embed,
}

impl Command {
    pub fn kind(self) -> ExperimentKind {
        match self {
            Command::Drift => ExperimentKind::Drift,
            Command::Compare => ExperimentKind::Compare,
            Command::Interp => ExperimentKind::Interp,
            Command::Scaling => ExperimentKind::Scaling,
            Command::Theory => ExperimentKind::Theory,
            Command::Embed => ExperimentKind::Embed,
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Config { path: String, source: Error },

    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Core(Error::Config(_)) => EXIT_CONFIG,
            CliError::Core(Error::Numeric(_)) => EXIT_NUMERIC,
            CliError::Core(_) => EXIT_FAILURE,
        }
    }
}

/// Raw config text and its parsed form; the subcommand fixes the experiment.
pub fn load_config(kind: ExperimentKind, path: Option<&Path>) -> Result<(String, ExperimentConfig), CliError> {
    let (label, src) = match path {
        Some(p) => {
            let src = fs::read_to_string(p).map_err(|e| CliError::Config {
                path: p.display().to_string(),
                source: Error::Config(e.to_string()),
            })?;
            (p.display().to_string(), src)
        }
        None => ("<default>".to_string(), format!("experiment = \"{}\"\n", kind.name())),
    };
    let wrap = |source| CliError::Config {
        path: label.clone(),
        source,
    };
    let cfg = ExperimentConfig::parse(&src).map_err(wrap)?;
    if cfg.experiment != kind {
        let line = raf_core::config::key_line(&src, "", "experiment").unwrap_or(1);
        return Err(wrap(Error::Config(format!(
            "line {line}: experiment: `{}` does not match subcommand `{}`",
            cfg.experiment.name(),
            kind.name()
        ))));
    }
    Ok((src, cfg))
}

struct Output {
    dir: PathBuf,
    header: String,
}

impl Output {
    fn create(&self, name: &str) -> Result<BufWriter<fs::File>, Error> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(BufWriter::new(fs::File::create(path)?))
    }

    fn csv(&self, name: &str, write: impl FnOnce(&mut BufWriter<fs::File>, &str) -> raf_core::Result<()>) -> Result<(), Error> {
        let mut f = self.create(name)?;
        write(&mut f, &self.header)?;
        f.flush()?;
        Ok(())
    }

    fn logs(&self, runs: &[RunLog]) -> Result<(), Error> {
        for run in runs {
            self.csv(&format!("rounds/{}.csv", run.label), |f, h| {
                writeln!(f, "{h}")?;
                write_round_logs(f, &run.logs)
            })?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct Stamped<'a, T> {
    config_hash: &'a str,
    seed: u64,
    #[serde(flatten)]
    body: T,
}

fn finite(values: impl IntoIterator<Item = f64>, what: &str) -> Result<(), Error> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite value in {what}")))
    }
}

/// Run one subcommand; returns the output directory.
pub fn run(command: Command, opts: &Opts) -> Result<PathBuf, CliError> {
    let (src, mut cfg) = load_config(command.kind(), opts.config.as_deref())?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    let hash = config_hash(src.as_bytes());
    let dir = opts
        .out
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let out = Output {
        dir: dir.clone(),
        header: header_comment(&hash, cfg.seed),
    };
    let workers = usize::try_from(opts.workers).unwrap_or(usize::MAX);
    fs::create_dir_all(&dir).map_err(Error::from)?;
    {
        let mut f = out.create("config.toml")?;
        writeln!(f, "{}\n{}", out.header, cfg.to_toml()).map_err(Error::from)?;
    }
    match command {
        Command::Drift => {
            let d = experiments::drift(&cfg, workers)?;
            finite(d.rows.iter().map(|r| r.low_pck), "drift table")?;
            out.csv("drift.csv", |f, h| experiments::write_drift_csv(f, h, &d))?;
            out.logs(&d.runs)?;
        }
        Command::Compare => {
            let c = experiments::compare(&cfg, workers)?;
            finite(c.pck.iter().flatten().copied(), "compare table")?;
            out.csv("compare.csv", |f, h| experiments::write_compare_csv(f, h, &c))?;
            out.logs(&c.runs)?;
            for rep in &c.repeats {
                for (v, params) in experiments::Variant::ALL.iter().zip(&rep.params) {
                    let hyper = serde_json::json!({
                        "config_hash": hash,
                        "variant": v.name(),
                        "repeat": rep.data.repeat,
                        "init_seed": rep.data.init_seed,
                        "train": cfg.train,
                        "loss": cfg.loss,
                    });
                    let ckpt = dir.join(format!("checkpoints/{}_rep{}", v.name(), rep.data.repeat));
                    save_checkpoint(&ckpt, params, &cfg.model, cfg.seed, hyper)?;
                }
            }
        }
        Command::Interp => {
            let (t, runs) = experiments::interp(&cfg, workers)?;
            finite(
                std::iter::once(t.direct).chain(t.rows.iter().flat_map(|(_, v)| v.iter().copied())),
                "interp table",
            )?;
            out.csv("interp.csv", |f, h| experiments::write_interp_csv(f, h, &t))?;
            out.logs(&runs)?;
        }
        Command::Scaling => {
            let (rows, runs) = experiments::scaling(&cfg, workers)?;
            finite(rows.iter().flat_map(|r| [r.base, r.raf]), "scaling table")?;
            out.csv("scaling.csv", |f, h| experiments::write_scaling_csv(f, h, &rows))?;
            out.logs(&runs)?;
        }
        Command::Theory => {
            let t = experiments::theory(&cfg)?;
            finite(t.curve.iter().flat_map(|&(_, g, e)| [g, e]), "gap curve")?;
            out.csv("theory_gap.csv", |f, h| experiments::write_gap_csv(f, h, &t.curve))?;
            let stamped = Stamped {
                config_hash: &hash,
                seed: cfg.seed,
                body: &t.report,
            };
            let mut f = out.create("theory_report.json")?;
            serde_json::to_writer_pretty(&mut f, &stamped).map_err(Error::from)?;
            writeln!(f).map_err(Error::from)?;
            f.flush().map_err(Error::from)?;
        }
        Command::Embed => {
            let (rows, runs) = experiments::embed(&cfg, workers)?;
            finite(rows.iter().flat_map(|r| r.features.iter().copied()), "embeddings")?;
            out.csv("embeddings.csv", |f, h| experiments::write_embed_csv(f, h, &rows))?;
            out.logs(&runs)?;
        }
    }
    Ok(dir)
}
