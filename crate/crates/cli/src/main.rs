mod commands;
mod logging;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use gobl_core::gobl::CONFIG_KEYS;

/// Negation-aware visual grounding with grouped opposition learning.
#[derive(Parser, Debug)]
#[command(name = "gobl", version)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run directory; every artifact is written here under a fixed name.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key=value` overrides; they win over the config file.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Generate a synthetic manifest (manifest.json).
    SynthGen {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
    /// Keep single-annotation images of a COCO file (coco_filtered.json).
    CocoFilter {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Emit one MLLM annotation prompt per manifest entry (prompts.jsonl).
    PromptEmit {
        #[command(flatten)]
        common: Common,
        /// Defaults to `manifest_path`, then <out>/manifest.json.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Validate an MLLM response (descriptions.json).
    ParseMllm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Dataset statistics (stats.json).
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Stratified train/test split (train_manifest.json, test_manifest.json).
    Split {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
    },
    /// Positive-only pretraining (checkpoint.goblckpt, train.log.jsonl).
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Grouped opposition fine-tuning (checkpoint.goblckpt, train.log.jsonl).
    Finetune {
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint (report.json, report.md, predictions.jsonl).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "intra")]
        protocol: String,
        /// json, markdown or both.
        #[arg(long, default_value = "both")]
        format: String,
        #[arg(long, default_value_t = gobl_core::eval::DEFAULT_TOP_K)]
        top_k: usize,
    },
    /// Finite-difference check of every loss term (gradcheck.json).
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Re-render a report.json (report.md or report.json).
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "markdown")]
        format: String,
    },
}

fn keys_help() -> String {
    let mut s = String::from("Config keys (config file or KEY=VALUE):\n");
    for k in CONFIG_KEYS {
        s.push_str("  ");
        s.push_str(k);
        s.push('\n');
    }
    s.push_str("\nEnvironment: GOBL_LOG_LEVEL = error | info | debug\n");
    s.push_str("Exit codes: 0 ok, 1 usage, 2 data, 3 numerical failure\n");
    s
}

fn main() -> ExitCode {
    let help = keys_help();
    let command = Cli::command()
        .after_help(help.clone())
        .mut_subcommands(|s| s.after_help(help.clone()));
    let matches = match command.try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match commands::run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if log::max_level() == log::LevelFilter::Off {
                eprintln!("error: {e}");
            } else {
                log::error!("{e}");
            }
            ExitCode::from(e.code())
        }
    }
}
