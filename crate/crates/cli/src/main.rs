mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use citeintent::ErrorKind;

#[derive(Debug, Parser)]
#[command(name = "citeintent", version, about = "Prompt-based citation intent classification")]
pub struct Cli {
    /// Run configuration (TOML). Flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run with this single seed instead of the configured list.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output location of the command's artifact.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Model identity (checkpoint path).
    #[arg(long, global = true)]
    pub mlm: Option<String>,
    /// Label schema: scicite or acl_arc.
    #[arg(long, global = true)]
    pub schema: Option<String>,
    /// Print errors as a JSON object on stderr.
    #[arg(long, global = true)]
    pub json_errors: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fill per-section word corpora from a parsed-paper stream.
    IngestCorpus(IngestArgs),
    /// Build a verbalizer from anchors, section corpora and word vectors.
    BuildVerbalizer(BuildArgs),
    /// Apply frequency and relevance refinement to a verbalizer.
    RefineVerbalizer(RefineArgs),
    /// Fine-tune a model and its verbalizer weights.
    Train(TrainArgs),
    /// Run the configured regime over all seeds and write a report.
    Evaluate(EvaluateArgs),
    /// Classify citation sentences, one JSON line per input line.
    Predict(PredictArgs),
    /// Render a saved evaluation report.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub quota: Option<usize>,
    #[arg(long)]
    pub field_of_study: Option<String>,
    #[arg(long)]
    pub section_aliases: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Corpus archive directory.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub anchors: Option<PathBuf>,
    #[arg(long)]
    pub section_map: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub verbalizer: Option<PathBuf>,
    /// Dataset whose texts form the unlabeled support set (defaults to the train split).
    #[arg(long)]
    pub support: Option<PathBuf>,
    #[arg(long)]
    pub support_size: Option<usize>,
    #[arg(long)]
    pub frequency_quantile: Option<f64>,
    #[arg(long)]
    pub relevance_threshold: Option<f64>,
    #[arg(long)]
    pub min_words_per_label: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub verbalizer: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// supervised, N-shot or zero-shot.
    #[arg(long)]
    pub regime: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub verbalizer: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub regime: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, overrides_with = "no_calibrate")]
    pub calibrate: bool,
    #[arg(long, overrides_with = "calibrate")]
    pub no_calibrate: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub verbalizer: Option<PathBuf>,
    /// Sentences, one per line; `-` or absent reads standard input.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Calibrate with priors estimated on the train split texts.
    #[arg(long)]
    pub calibrate: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Saved `report.json`.
    #[arg(long)]
    pub input: Option<PathBuf>,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 2,
        ErrorKind::Data => 3,
        ErrorKind::Model => 4,
    }
}

fn kind_name(kind: ErrorKind) -> &'static str {
    match kind {
        ErrorKind::Usage => "usage",
        ErrorKind::Data => "data",
        ErrorKind::Model => "model",
    }
}

fn report_error(json: bool, kind: ErrorKind, message: &str) -> ExitCode {
    let code = exit_code(kind);
    if json {
        let obj = serde_json::json!({
            "error": { "kind": kind_name(kind), "exit_code": code, "message": message }
        });
        eprintln!("{obj}");
    } else {
        eprintln!("error: {message}");
    }
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let json_errors = std::env::args().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) if json_errors => {
            return report_error(true, ErrorKind::Usage, e.render().to_string().trim());
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(exit_code(ErrorKind::Usage));
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_error(cli.json_errors, e.kind(), &e.to_string()),
    }
}
