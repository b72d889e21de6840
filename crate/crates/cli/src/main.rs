mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use config::ConfigArgs;

/// Attention-guided input shortening: training, filtering, scoring and
/// conditional generation recipes.
#[derive(Parser)]
#[command(name = "attnshort", version, propagate_version = true)]
struct Cli {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

/// A trained classifier and the vocabulary it was trained with.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured planted-keyword dataset as JSON lines.
    Synth {
        #[arg(long)]
        output: PathBuf,
    },
    /// Fine-tune a classifier on the training split (first configured seed).
    Train,
    /// Attention-filter a dataset with a trained classifier.
    Filter {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Keep the lowest-scoring tokens instead of the highest.
        #[arg(long)]
        bottom: bool,
    },
    /// Shorten texts by dropping near-duplicate sentences.
    Simfilter {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Share of tokens to remove per text.
        #[arg(long, default_value_t = 0.5)]
        target: f64,
    },
    /// Classifier accuracy on a dataset.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        input: PathBuf,
    },
    /// Accuracy of the full-length classifier on test data filtered with each layer.
    Sweep,
    /// Full-length against top- and bottom-filtered fine-tuning.
    Topbottom,
    /// Accuracy against keep fraction for attention and similarity filtering.
    Curve,
    /// Planted-keyword recall of attention filtering against random selection.
    Recall,
    /// End-to-end conditional generation with and without the label slot.
    Fidelity,
    /// Embedding-similarity scores of candidates against references.
    Score {
        #[command(flatten)]
        model: ModelArgs,
        /// One reference text per line.
        #[arg(long)]
        references: PathBuf,
        /// One candidate text per line, aligned with the references.
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Build generation records from a dataset's top-attention tokens.
    Genbuild {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Leave the label slot empty.
        #[arg(long)]
        no_label: bool,
    },
    /// Train a language model on generation records.
    Gentrain {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        num_classes: Option<usize>,
    },
    /// Continue the prompt part of each record.
    Gensample {
        #[arg(long)]
        lm: PathBuf,
        #[arg(long)]
        lm_vocab: PathBuf,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Share of generated texts classified as their intended label.
    Genfideval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        generated: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = cli.cfg.resolve()?;
    match cli.command {
        Command::Synth { output } => commands::synth(&cfg, &output),
        Command::Train => commands::train(&cfg),
        Command::Filter { model, input, output, bottom } => commands::filter(&cfg, &model, &input, &output, bottom),
        Command::Simfilter { model, input, output, target } => commands::simfilter(&cfg, &model, &input, &output, target),
        Command::Eval { model, input } => commands::eval(&cfg, &model, &input),
        Command::Sweep => commands::sweep(cfg),
        Command::Topbottom => commands::topbottom(cfg),
        Command::Curve => commands::curve(cfg),
        Command::Recall => commands::recall(cfg),
        Command::Fidelity => commands::fidelity(cfg),
        Command::Score { model, references, candidates, output } => {
            commands::score(&model, &references, &candidates, &output)
        }
        Command::Genbuild { model, input, output, no_label } => commands::genbuild(&cfg, &model, &input, &output, !no_label),
        Command::Gentrain { records, num_classes } => commands::gentrain(&cfg, &records, num_classes),
        Command::Gensample { lm, lm_vocab, records, output } => commands::gensample(&cfg, &lm, &lm_vocab, &records, &output),
        Command::Genfideval { model, generated } => commands::genfideval(&model, &generated),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = err.downcast_ref::<attnshort::Error>().map_or("cli", |e| e.kind());
            let line = serde_json::json!({ "error": kind, "message": format!("{err:#}") });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
