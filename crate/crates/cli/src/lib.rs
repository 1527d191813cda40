//! The `ghnforge` command line. Every subcommand reads one experiment file,
//! writes `manifest.json` into its output directory before doing any work,
//! and leaves all artifacts next to it.

mod commands;
pub mod config;
mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::ExperimentConfig;
pub use manifest::Manifest;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<ghnforge::Error> for CliError {
    fn from(e: ghnforge::Error) -> Self {
        use ghnforge::Error as E;
        let msg = e.to_string();
        if e.is_numeric() {
            return CliError::Numeric(msg);
        }
        match e {
            E::Io(_) | E::Format { .. } | E::Json(_) => CliError::Io(msg),
            _ => CliError::Config(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "ghnforge", version, about = "Predict CNN parameters with a graph hypernetwork")]
pub struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment file (TOML).
    #[arg(short, long)]
    pub config: PathBuf,
    /// Output directory; created if missing.
    #[arg(short, long)]
    pub out: PathBuf,
}

/// Inputs produced by earlier commands. Anything omitted is regenerated
/// from the experiment file, which gives the same result.
#[derive(Debug, Args)]
pub struct Inputs {
    /// Training space directory written by `gen-space`.
    #[arg(long)]
    pub space: Option<PathBuf>,
    /// Held-out space directory written by `gen-space`.
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    /// Dataset directory; overrides `[data]`.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample the training and held-out architecture spaces and write the dataset.
    GenSpace {
        #[command(flatten)]
        common: Common,
        /// Do not write the dataset.
        #[arg(long)]
        no_data: bool,
    },
    /// Train a hypernetwork; writes metrics.csv, checkpoint/ and model.ghnm.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        /// Continue from <out>/checkpoint if present.
        #[arg(long)]
        resume: bool,
    },
    /// Predict parameters for architectures (default: the held-out space).
    Predict {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        model: PathBuf,
        /// Architecture JSON files; replaces the held-out space.
        #[arg(long = "arch")]
        archs: Vec<PathBuf>,
    },
    /// Accuracy of predicted parameters without fine-tuning.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        model: PathBuf,
    },
    /// Fine-tune from predicted versus random parameters, or run transfer.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        model: PathBuf,
        /// Reinitialise the classifier and fine-tune on `[transfer.data]`.
        #[arg(long)]
        transfer: bool,
    },
    /// Diversity, activation variance and rank correlation analyses.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        model: PathBuf,
        /// Second model probed alongside the first (e.g. trained without regularisation).
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        diversity: bool,
        #[arg(long)]
        variance: bool,
        #[arg(long)]
        tau: bool,
    },
    /// Train and score every (variant, regularisation, seed) cell.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenSpace { .. } => "gen-space",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
            Command::Eval { .. } => "eval",
            Command::Finetune { .. } => "finetune",
            Command::Analyze { .. } => "analyze",
            Command::Ablate { .. } => "ablate",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenSpace { common, .. }
            | Command::Train { common, .. }
            | Command::Predict { common, .. }
            | Command::Eval { common, .. }
            | Command::Finetune { common, .. }
            | Command::Analyze { common, .. }
            | Command::Ablate { common, .. } => common,
        }
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code. Errors are reported on stderr.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("ghnforge {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let common = cli.command.common();
    let env_seed = std::env::var(config::SEED_ENV).ok();
    let cfg = ExperimentConfig::load(&common.config)?.resolve(env_seed.as_deref())?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::create_dir_all(&common.out).map_err(|e| CliError::Io(format!("{}: {e}", common.out.display())))?;
    pool.install(|| commands::dispatch(&cli.command, &cfg))
}
