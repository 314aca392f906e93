mod commands;
mod draw;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "textspotter", version, about = "Scene text spotting: data, training, evaluation and inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML configuration file; built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Config override as a dotted path, e.g. `--set train.iterations=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory. Defaults to `$TEXTSPOTTER_OUT/<command>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Root for default output directories.
    #[arg(long, env = "TEXTSPOTTER_OUT", hide_env_values = true)]
    pub out_root: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic dataset: PNG images plus annotations.jsonl.
    Generate {
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint, or an existing prediction file, against a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Word list, one per line; adds lexicon-corrected end-to-end scores.
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run a checkpoint on one image or every PNG in a directory.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Draw predicted polygons, scores and transcripts onto the images.
    Visualize {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            return commands::CliError::new("usage", first).report();
        }
    };
    let result = match cli.command {
        Command::Generate { count, common } => commands::generate(&common, count),
        Command::Train { data, common } => commands::train(&common, &data),
        Command::Eval {
            data,
            checkpoint,
            predictions,
            lexicon,
            common,
        } => commands::eval(&common, &data, checkpoint.as_deref(), predictions.as_deref(), lexicon.as_deref()),
        Command::Infer {
            checkpoint,
            input,
            common,
        } => commands::infer(&common, &checkpoint, &input),
        Command::Visualize {
            predictions,
            images,
            common,
        } => commands::visualize(&common, &predictions, &images),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.report(),
    }
}
