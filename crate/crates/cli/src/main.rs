//! `pbcurl`: generate data, train posteriors over a hyperparameter grid,
//! certify, evaluate, re-rank, and run the verification suite.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pbcurl_core::grid::Criterion;
use pbcurl_core::losses::LossKind;

#[derive(Debug, Parser)]
#[command(
    name = "pbcurl",
    version,
    about = "PAC-Bayesian contrastive representation learning"
)]
struct Cli {
    /// Output directory; created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Omit timestamps and wall-clock times so reports are byte-reproducible.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Global seed; overrides every seed in the configuration.
    #[arg(long, global = true, env = "PBCURL_SEED")]
    seed: Option<u64>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Materialise a dataset specification into manifest files.
    GenData {
        /// Dataset specification or experiment configuration (JSON).
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the configured grid under every selection criterion.
    Train {
        /// Experiment configuration (JSON).
        #[arg(long)]
        config: PathBuf,
    },
    /// Certify a checkpoint on a dataset split.
    Bound(BoundArgs),
    /// Mean-classifier metrics and Monte Carlo risks of checkpoints.
    Eval(EvalArgs),
    /// Re-rank recorded runs, optionally recomputing their certificates.
    Select(SelectArgs),
    /// Run the oracle verification suite.
    Verify {
        /// Reduced sizes for a fast smoke run.
        #[arg(long)]
        quick: bool,
    },
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset specification or experiment configuration (JSON).
    #[arg(long)]
    data: PathBuf,
    /// Split to use.
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
    /// Training and validation tuples pooled, as used by PB runs.
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RiskArg {
    Loss,
    ZeroOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LossArg {
    Logistic,
    Hinge,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Logistic => LossKind::Logistic,
            LossArg::Hinge => LossKind::Hinge,
        }
    }
}

#[derive(Debug, Args)]
struct BoundArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Independent-tuple certificate.
    #[arg(long, conflicts_with = "noniid")]
    iid: bool,
    /// Dependent-tuple certificate with dependency length `--T`.
    #[arg(long, requires = "t")]
    noniid: bool,
    #[arg(long = "T", id = "t")]
    t: Option<usize>,
    #[arg(long, value_enum, default_value = "zero-one")]
    risk: RiskArg,
    /// Required for the iid loss certificate.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_enum, default_value = "logistic")]
    loss: LossArg,
    #[arg(long, default_value_t = 10)]
    mc_samples: usize,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    #[arg(long, default_value_t = 100.0)]
    b: f64,
    #[arg(long, default_value_t = 0.1)]
    c: f64,
    /// Report name: written to `bound_<id>.json`. Defaults to the checkpoint file stem.
    #[arg(long)]
    id: Option<String>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoints to evaluate; repeatable.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    /// Dataset specification or experiment configuration (JSON).
    #[arg(long)]
    data: PathBuf,
    /// Criterion the checkpoints were trained under; PB means pooled training data.
    #[arg(long, default_value = "PB")]
    criterion: Criterion,
    #[arg(long, value_enum, default_value = "logistic")]
    loss: LossArg,
    #[arg(long, default_value_t = 10)]
    mc_samples: usize,
    /// Points per class of the subsampled mean classifier.
    #[arg(long, default_value_t = 5)]
    subset: usize,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
}

#[derive(Debug, Args)]
struct SelectArgs {
    /// Run records written by `train`.
    #[arg(long)]
    runs: PathBuf,
    /// Experiment configuration; when given, certificates are recomputed from the checkpoints.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Criteria to rank under; defaults to those present in the records.
    #[arg(long, value_delimiter = ',')]
    criteria: Vec<Criterion>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
