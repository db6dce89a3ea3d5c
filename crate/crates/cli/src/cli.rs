//! Argument parsing and the machine-readable failure record.

use std::path::PathBuf;

use anyhow::{anyhow, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::config::{ExperimentConfig, Method};
use crate::pipeline::{self, RunOptions, TrainKind};
use crate::store::Layout;

#[derive(Debug, Parser)]
#[command(name = "rare", version, about = "Simulated 4D radial MRI study: artifact-to-artifact training and RARE reconstruction")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "RARE_THREADS")]
    pub threads: Option<usize>,
    /// Suppress progress output.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's global seed.
    #[arg(long, value_parser = clap::value_parser!(u64).range(0..=i64::MAX as u64))]
    pub seed: Option<u64>,
    /// Run directory; overrides `out` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated subset of zf, cs-tv, rare-a2a, red-denoiser.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Skip work whose recorded input digests still match.
    #[arg(long)]
    pub resume: bool,
    /// Search grid such as `tau=0.1,0.3,1` or `lambda=0.005,0.01`; repeatable.
    #[arg(long)]
    pub grid: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum KindArg {
    A2a,
    Denoiser,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate phantoms, training acquisitions and test measurements.
    Simulate(Common),
    /// Train the A2A network and/or the AWGN denoisers.
    Train {
        #[command(flatten)]
        common: Common,
        /// Which networks to train; by default those the configured methods need.
        #[arg(long, value_enum)]
        kind: Option<KindArg>,
    },
    /// Reconstruct every test case with every method.
    Reconstruct(Common),
    /// Score reconstructions against groundtruth.
    Evaluate(Common),
    /// Tables, per-phase curves and magnified residual images.
    Report {
        #[command(flatten)]
        common: Common,
        /// Residual magnification; overrides the config.
        #[arg(long)]
        residual_factor: Option<f64>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Train { .. } => "train",
            Command::Reconstruct(_) => "reconstruct",
            Command::Evaluate(_) => "evaluate",
            Command::Report { .. } => "report",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Simulate(c) | Command::Reconstruct(c) | Command::Evaluate(c) => c,
            Command::Train { common, .. } | Command::Report { common, .. } => common,
        }
    }
}

/// The config after command-line overrides.
pub fn effective_config(common: &Common) -> Result<(ExperimentConfig, Layout)> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    if let Some(methods) = &common.methods {
        cfg.methods = methods.iter().map(|m| m.parse::<Method>()).collect::<Result<_>>()?;
    }
    for g in &common.grid {
        cfg.apply_grid(g)?;
    }
    cfg.validate()?;
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| anyhow!("no run directory: pass --out or set `out` in the config"))?;
    Ok((cfg, Layout::new(out)))
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(anyhow!("RARE_THREADS / --threads must be >= 1"));
        }
        // A second call in the same process fails harmlessly; the pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let opts = RunOptions {
        resume: cli.command.common().resume,
        quiet: cli.quiet,
    };
    let (mut cfg, layout) = effective_config(cli.command.common())?;
    match &cli.command {
        Command::Simulate(_) => {
            pipeline::simulate(&cfg, &layout, opts)?;
        }
        Command::Train { kind, .. } => {
            let kinds = match kind {
                Some(KindArg::A2a) => vec![TrainKind::A2a],
                Some(KindArg::Denoiser) => vec![TrainKind::Denoiser],
                None => TrainKind::required(&cfg),
            };
            if kinds.is_empty() {
                opts.say("train: configured methods need no trained networks");
            }
            for k in kinds {
                pipeline::train_stage(&cfg, &layout, k, opts)?;
            }
        }
        Command::Reconstruct(_) => {
            pipeline::reconstruct(&cfg, &layout, opts)?;
        }
        Command::Evaluate(_) => {
            pipeline::evaluate(&cfg, &layout, opts)?;
        }
        Command::Report { residual_factor, .. } => {
            if let Some(f) = residual_factor {
                cfg.report.residual_factor = *f;
                cfg.validate()?;
            }
            pipeline::report(&cfg, &layout, opts)?;
        }
    }
    Ok(())
}

/// One-line JSON failure record.
pub fn error_record(command: &str, err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<rare_core::Error>())
        .map(|e| e.kind())
        .unwrap_or("error");
    let causes: Vec<String> = err.chain().skip(1).map(|e| e.to_string()).collect();
    json!({
        "error": {
            "command": command,
            "kind": kind,
            "message": format!("{err:#}"),
            "causes": causes,
        }
    })
    .to_string()
}
