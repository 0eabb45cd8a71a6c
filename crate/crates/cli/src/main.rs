//! `phrasesim` command-line tool.
//!
//! Every subcommand except `validate` reads a JSON pipeline config; flags
//! override individual config values. Outputs go under the config's
//! `output_dir` in `splits/`, `checkpoints/`, `preds/` and `reports/`.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use phrasesim::corpus::{CorpusError, Partition};
use phrasesim::encoder::EncoderError;
use phrasesim::metrics::MetricsError;
use phrasesim::training::TrainingError;
use phrasesim::{Error, Variant};

use crate::config::FoldScope;

#[derive(Parser, Debug)]
#[command(
    name = "phrasesim",
    version,
    about = "Patent phrase similarity pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a dataset and print record, anchor, context and score counts.
    Validate(ValidateArgs),
    /// Write the anchor-grouped train/validation/test assignment.
    Split(SplitArgs),
    /// Write the stratified k-fold assignment.
    Fold(FoldArgs),
    /// Train an encoder and write its checkpoint, vocabulary and history.
    Train(TrainArgs),
    /// Score records with a trained checkpoint.
    Predict(PredictArgs),
    /// Pearson r of a prediction file against the gold scores.
    Evaluate(EvaluateArgs),
    /// Search blending weights and write the blended predictions.
    Blend(BlendArgs),
}

#[derive(Args, Debug)]
struct ValidateArgs {
    /// Dataset CSV with id, anchor, target, context and score columns.
    dataset: PathBuf,
    /// Optional `code,title` table checked against the dataset contexts.
    #[arg(long)]
    contexts: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct FoldArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    scope: Option<FoldScope>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Hold out this fold of `folds.csv` for validation instead of using the
    /// validation partition.
    #[arg(long)]
    fold: Option<usize>,
    /// Name for the output files; defaults to the variant, plus the fold.
    #[arg(long)]
    run_name: Option<String>,
    #[arg(long)]
    no_awp: bool,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the `.vocab.txt` file next to the checkpoint.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Defaults to the dataset named in the config.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Must match the variant recorded in the checkpoint when given.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Score only this holdout partition.
    #[arg(long, value_parser = parse_partition)]
    partition: Option<Partition>,
    /// Score only this fold of `folds.csv`.
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    preds: PathBuf,
    /// Compare against this holdout partition only.
    #[arg(long, value_parser = parse_partition)]
    partition: Option<Partition>,
    /// Compare against this fold of `folds.csv` only.
    #[arg(long, conflicts_with = "folds")]
    fold: Option<usize>,
    /// Report per-fold and pooled r using `folds.csv`.
    #[arg(long)]
    folds: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BlendArgs {
    #[arg(long)]
    config: PathBuf,
    /// Prediction files, one per model.
    #[arg(long, num_args = 2.., required = true)]
    preds: Vec<PathBuf>,
    /// Model names for the weights file; defaults to the file stems.
    #[arg(long, num_args = 1..)]
    names: Vec<String>,
    /// Partition the weights are fitted on.
    #[arg(long, value_parser = parse_partition, default_value = "validation")]
    partition: Partition,
    #[arg(long, default_value_t = 0.05)]
    step: f64,
    /// Apply these weights instead of searching.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Also fit weights separately inside every fold of `folds.csv`.
    #[arg(long)]
    per_fold: bool,
    #[arg(long, default_value = "blend")]
    name: String,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse()
}

fn parse_partition(s: &str) -> Result<Partition, String> {
    s.parse()
}

/// Why a command failed; each kind maps to its own exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad input data.
    Validation(String),
    /// Bad config, flags, or artifacts that do not fit together.
    Config(String),
    /// Divergence, non-finite values or undefined correlations.
    Numerical(String),
    Io(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Validation(_) => 3,
            Failure::Config(_) => 4,
            Failure::Numerical(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m)
            | Failure::Config(m)
            | Failure::Numerical(m)
            | Failure::Io(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Corpus(c) => c.into(),
            Error::Training(
                TrainingError::Diverged { .. } | TrainingError::NonFiniteGradient(_),
            )
            | Error::Encoder(EncoderError::NonFinite { .. })
            | Error::Metrics(MetricsError::ConstantInput | MetricsError::NonFinite(_))
            | Error::Ensemble(phrasesim::ensemble::EnsembleError::Metrics(
                MetricsError::ConstantInput,
            )) => Failure::Numerical(msg),
            Error::Encoder(EncoderError::Io(_))
            | Error::Text(phrasesim::textprep::TextError::Io(_)) => Failure::Io(msg),
            _ => Failure::Config(msg),
        }
    }
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        let msg = e.to_string();
        match e {
            CorpusError::Io { .. } => Failure::Io(msg),
            CorpusError::Csv(_)
            | CorpusError::MissingColumns(_)
            | CorpusError::EmptyDataset
            | CorpusError::Invalid(_) => Failure::Validation(msg),
            _ => Failure::Config(msg),
        }
    }
}

macro_rules! impl_via_error {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Error::from(e).into()
            }
        }
    )*};
}

impl_via_error!(
    EncoderError,
    MetricsError,
    TrainingError,
    phrasesim::textprep::TextError,
    phrasesim::ensemble::EnsembleError
);

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate(a) => commands::validate(&a.dataset, a.contexts.as_deref()),
        Command::Split(a) => commands::split(&a),
        Command::Fold(a) => commands::fold(&a),
        Command::Train(a) => commands::train(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Blend(a) => commands::blend(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}
