//! `nmc`: train a name tokenizer, pretrain an encoder, fine-tune a
//! classifier, predict and evaluate.
//!
//! Exit codes: 0 success, 1 usage, 2 data, 3 config.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nmc_core::Error;

#[derive(Debug, Parser)]
#[command(name = "nmc", version, about = "Race and ethnicity classification from names")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Learn a BPE vocabulary from the names in a CSV file.
    TrainTokenizer(TrainTokenizerArgs),
    /// Pretrain an encoder with the masked-LM objective.
    Pretrain(PretrainArgs),
    /// Fine-tune a classifier and report metrics on a held-out split.
    Train(TrainArgs),
    /// Classify one name or every row of a CSV file.
    Predict(PredictArgs),
    /// Per-class precision, recall and f1 on labeled data.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Labeled or unlabeled names, CSV with a header row.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    first_col: Option<String>,
    #[arg(long)]
    last_col: Option<String>,
}

#[derive(Debug, Args)]
struct TrainTokenizerArgs {
    #[command(flatten)]
    common: Common,
    /// Vocabulary budget, specials included [default: 500]
    #[arg(long)]
    max_vocab: Option<usize>,
    /// case_marked or underscore_lower [default: case_marked]
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainFlags {
    #[arg(long)]
    seed: Option<u64>,
    /// [default: 4]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 128]
    #[arg(long)]
    batch_size: Option<usize>,
    /// [default: 2e-5]
    #[arg(long)]
    lr: Option<f32>,
    /// [default: 2e-5]
    #[arg(long)]
    weight_decay: Option<f32>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Token budget per name, [CLS] and [SEP] included [default: 32]
    #[arg(long)]
    max_len: Option<usize>,
    /// case_marked or underscore_lower [default: case_marked]
    #[arg(long)]
    scheme: Option<String>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Loss curve path [default: <out>.loss.tsv]
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Optional when --init-lm is given: the LM's vocabulary is used.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Pretrained LM to initialize the encoder from; random init if omitted.
    #[arg(long)]
    init_lm: Option<PathBuf>,
    /// race5, ethnicity13 or custom [default: race5]
    #[arg(long)]
    task: Option<config::Task>,
    /// Comma-separated class list for --task custom.
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<String>>,
    #[arg(long)]
    label_col: Option<String>,
    #[command(flatten)]
    train: TrainFlags,
    /// [default: 0.1]
    #[arg(long)]
    test_fraction: Option<f64>,
    /// [default: 42]
    #[arg(long)]
    split_seed: Option<u64>,
    /// Weight the loss by inverse class frequency.
    #[arg(long)]
    class_weighting: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Metrics table path [default: <out>.report.txt, JSON beside it]
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// "First Last"; splits on the last whitespace.
    #[arg(long, conflicts_with = "csv", required_unless_present = "csv")]
    name: Option<String>,
    #[arg(long, requires = "out")]
    csv: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "first_name")]
    first_col: String,
    #[arg(long, default_value = "last_name")]
    last_col: String,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, required_unless_present = "predictions")]
    model: Option<PathBuf>,
    /// CSV with `label` and `predicted` columns, evaluated without a model.
    #[arg(long, conflicts_with = "model")]
    predictions: Option<PathBuf>,
    /// Label set for --predictions [default: race5]
    #[arg(long)]
    task: Option<config::Task>,
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<String>>,
    #[arg(long)]
    label_col: Option<String>,
    /// Two-column `class,f1` file; adds the improvement table.
    #[arg(long)]
    baseline_f1: Option<PathBuf>,
    /// Denominator of % improvement: baseline or model
    #[arg(long, default_value = "baseline")]
    improvement_basis: String,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Also write the printed tables to a file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::TrainTokenizer(a) => commands::train_tokenizer(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Train(a) => commands::train(a),
        Command::Predict(a) => commands::predict(a),
        Command::Evaluate(a) => commands::evaluate(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
