// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end: restartable file-based stages over the core library.

pub mod config;
pub mod error;
pub mod io;
pub mod manifest;
pub mod pipeline;
pub mod stages;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use neuraxis::signal::Method;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::stages::{run_stage, Ctx, Stage};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "NEURAXIS_OUT";
pub const DEFAULT_OUT: &str = "neuraxis-out";

#[derive(Debug, Parser)]
#[command(name = "neuraxis", version, about = "Synthetic brain-axis discovery and LM steering pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; defaults are used for missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output root (default: $NEURAXIS_OUT, then ./neuraxis-out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Rerun stages even when their manifest is current.
    #[arg(long, global = true)]
    pub force: bool,
    /// Suppress progress messages.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate lexicon, word streams, recordings and the LM corpus.
    Synth,
    /// Band-limited phase connectivity and edge PCA.
    Connectivity {
        /// plv or wpli (overrides the config).
        #[arg(long)]
        method: Option<String>,
    },
    /// Fit state models and build the word atlas.
    Atlas,
    /// ICA axes and planted-axis matching.
    Axes,
    /// Associate axes with word labels.
    Validate,
    /// Train the toy language model.
    #[command(name = "train-lm")]
    TrainLm,
    /// Fit hidden-state adapters and build steering vectors.
    Adapter,
    /// Run steering sweeps and effect statistics.
    Steer,
    /// FDR summary and report.
    Report,
    /// Every stage in order.
    Pipeline,
}

impl Command {
    fn stages(&self) -> Vec<Stage> {
        match self {
            Command::Synth => vec![Stage::Synth],
            Command::Connectivity { .. } => vec![Stage::Connectivity],
            Command::Atlas => vec![Stage::Atlas],
            Command::Axes => vec![Stage::Axes],
            Command::Validate => vec![Stage::Validate],
            Command::TrainLm => vec![Stage::TrainLm],
            Command::Adapter => vec![Stage::Adapter],
            Command::Steer => vec![Stage::Steer],
            Command::Report => vec![Stage::Report],
            Command::Pipeline => Stage::ALL.to_vec(),
        }
    }
}

/// Output root from the flag, then the environment, then the default.
pub fn resolve_out(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// The effective config after applying the file and command-line overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.global.seed {
        cfg.master_seed = s;
    }
    if let Command::Connectivity { method: Some(m) } = &cli.command {
        cfg.signal.method = m.parse::<Method>().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    if cli.global.threads == Some(0) {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let root = resolve_out(cli.global.out.clone());
    io::ensure_dir(&root)?;
    io::write_bytes(&root.join("config.toml"), cfg.to_toml().as_bytes())?;
    let ctx = Ctx::new(root, cfg, cli.global.force, cli.global.quiet);
    let stages = cli.command.stages();
    let run = || stages.iter().try_for_each(|&s| run_stage(&ctx, s).map(|_| ()));
    match cli.global.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(e.to_string()))?
            .install(run),
        None => run(),
    }
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("neuraxis: {e}");
            e.exit_code()
        }
    }
}
