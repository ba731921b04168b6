//! The `symfuse` command line.
//!
//! Dotted overrides (`--section.key=value`) are split off before clap sees
//! the arguments and are applied after the preset and the config file.

mod commands;
mod rundir;
pub mod tables;

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use symfuse::EvalMode;

pub use commands::{ablate, paired_robustness, train_run, PairedRobustness, TrainOutcome};
pub use rundir::create_run_dir;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// A command failure, split by exit code.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<symfuse::Error> for Failure {
    fn from(e: symfuse::Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "symfuse",
    version,
    about = "Frozen-backbone RGB + DSM segmentation: train, evaluate, ablate",
    after_help = "Any config key can be overridden as --section.key=value, e.g. --mcrm.enabled=false"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// TOML config merged over the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Base preset: desk or paper.
    #[arg(long, global = true, default_value = "desk")]
    pub preset: String,

    /// Run seed (the config's `seed`, 42 unless set, when omitted).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Parent directory for run directories.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one model and write a run directory.
    Train,
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Full)]
        mode: ModeArg,
    },
    /// Train the component ablation rows on one seed and tabulate them.
    Ablate {
        /// Subset of Base,+CPIA,+CPIA+DGFM,Full (all four when omitted).
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Modality-missing evaluation of a checkpoint, or of freshly trained
    /// masking-on/off twins for each listed seed.
    Robustness {
        #[arg(long, conflicts_with = "paired_seeds")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        paired_seeds: Vec<u64>,
    },
    /// Frozen and trainable parameter counts per group, without training.
    Params {
        #[arg(long)]
        json: bool,
    },
    /// Write the configured synthetic dataset in the directory layout.
    ExportSynth {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Full,
    #[value(name = "rgb_only")]
    RgbOnly,
    #[value(name = "aux_only")]
    AuxOnly,
}

impl From<ModeArg> for EvalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => EvalMode::Full,
            ModeArg::RgbOnly => EvalMode::RgbOnly,
            ModeArg::AuxOnly => EvalMode::AuxOnly,
        }
    }
}

/// Separates `--a.b=value` overrides from the arguments clap should parse.
/// The program name (first element) is never treated as an override.
pub fn split_overrides(args: &[String]) -> (Vec<String>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for (i, arg) in args.iter().enumerate() {
        let dotted = arg
            .strip_prefix("--")
            .filter(|body| body.split_once('=').is_some_and(|(k, _)| k.contains('.')));
        match dotted {
            Some(body) if i > 0 => overrides.push(body.to_string()),
            _ => rest.push(arg.clone()),
        }
    }
    (rest, overrides)
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<String>,
{
    let args: Vec<String> = args.into_iter().map(Into::into).collect();
    let (argv, overrides) = split_overrides(&args);
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match commands::dispatch(&cli, &overrides) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}
