mod commands;
mod config_args;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config_args::ConfigArgs;

/// Diffusion-based sequential recommender with stability routing.
#[derive(Debug, Parser)]
#[command(name = "card", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Turn a raw `user<TAB>item<TAB>timestamp` log into a corpus directory.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, env = "CARD_DATA_DIR")]
        out: PathBuf,
    },
    /// Generate a cluster-structured corpus with labeled turning points.
    Synth(SynthArgs),
    /// Train one model and write a checkpoint, epoch log and run summary.
    Train {
        #[arg(long, env = "CARD_DATA_DIR")]
        data: PathBuf,
        #[arg(long, default_value = "full")]
        variant: String,
        /// Defaults to `<data>/runs/<variant>-seed<seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint under several sampling seeds.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, env = "CARD_DATA_DIR")]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        /// Defaults to the variant the checkpoint was trained with.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long, default_value = "test", value_parser = ["test", "valid"])]
        split: String,
        /// Report path; a CSV is written alongside. Defaults to `<ckpt>.eval.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate several variants over several seeds.
    Ablate {
        #[arg(long, env = "CARD_DATA_DIR")]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "full,no_routing,no_attention")]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        /// Defaults to `<data>/ablation`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Dump routing, removal masks and counterfactual records per sequence.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, env = "CARD_DATA_DIR")]
        data: PathBuf,
        /// Restrict to these user ids (repeatable).
        #[arg(long = "user")]
        users: Vec<String>,
        #[arg(long)]
        limit: Option<usize>,
        /// JSON-lines destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write SVG charts into this directory.
        #[arg(long)]
        plot: Option<PathBuf>,
        /// Epoch log for the loss chart. Defaults to `epochs.jsonl` beside the checkpoint.
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

#[derive(Debug, clap::Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    users: usize,
    #[arg(long, default_value_t = 400)]
    items: usize,
    #[arg(long, default_value_t = 8)]
    clusters: usize,
    #[arg(long, default_value_t = 0.5)]
    shift_prob: f64,
    #[arg(long, default_value_t = 0.1)]
    noise_rate: f64,
    #[arg(long, default_value_t = 8)]
    min_len: usize,
    #[arg(long, default_value_t = 16)]
    max_len: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, env = "CARD_DATA_DIR")]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            // keep the message, drop the usage block, fold onto one line
            let text = e.to_string();
            let message = text.split("\n\nUsage:").next().unwrap_or(&text);
            eprintln!("{}", message.split_whitespace().collect::<Vec<_>>().join(" "));
            return ExitCode::from(2);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
