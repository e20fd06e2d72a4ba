//! Command-line pipeline: synthetic data, preprocessing, training,
//! adaptation, translation, scoring and reporting.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod run_dir;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use mdnmt::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "mdnmt", version, about = "Multi-domain adaptation experiments for Transformer NMT")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every command.
#[derive(Clone, Debug, Default, Args)]
pub struct Common {
    /// Experiment configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (or file for translate).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long)]
    pub force: bool,
    /// Floating-point width used for training and decoding.
    #[arg(long, default_value_t = 32, value_parser = parse_precision)]
    pub precision: u32,
}

fn parse_precision(s: &str) -> std::result::Result<u32, String> {
    match s {
        "32" => Ok(32),
        "64" => Ok(64),
        _ => Err(format!("precision must be 32 or 64, got `{s}`")),
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpora described in [synth].
    SynthData(Common),
    /// Learn subwords and the vocabulary; write tagged training data.
    Prepare(Common),
    /// Run every stage of the configured strategy.
    Train(Common),
    /// Run the second stage of a two-stage strategy from a parent checkpoint.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        parent: PathBuf,
    },
    /// Translate one sentence per line with averaged checkpoints.
    Translate {
        #[command(flatten)]
        common: Common,
        /// Run directory produced by train or adapt.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Corpus whose tag or group conditions the output.
        #[arg(long)]
        domain: Option<String>,
        /// Checkpoints to average instead of the run's final snapshots.
        #[arg(long)]
        ckpt: Vec<PathBuf>,
    },
    /// Corpus BLEU of a hypothesis file against a reference file.
    Evaluate {
        #[command(flatten)]
        common: Common,
        hyp: PathBuf,
        reference: PathBuf,
    },
    /// BLEU table over the test outputs of run directories.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

/// Process exit status for a failure of `e`'s category.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 3,
        Error::Data(_) | Error::Generator(_) | Error::Length(_) | Error::Batch(_) => 4,
        Error::Plan(_) | Error::Scheme(_) | Error::Group(_) | Error::Domain(_) => 5,
        Error::Checkpoint(_) => 6,
        Error::Vocab(_) | Error::Mapping(_) => 7,
        Error::Context(_) => 8,
        Error::Numeric(_) | Error::Shape(_) | Error::Graph(_) => 9,
    }
}

/// Executes `cli`, writing command output to `out` and progress to stderr.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::SynthData(c) => commands::synth_data(&c, out),
        Command::Prepare(c) => commands::prepare(&c, out),
        Command::Train(c) => commands::train(&c, None, out),
        Command::Adapt { common, parent } => commands::train(&common, Some(&parent), out),
        Command::Translate {
            common,
            run,
            input,
            domain,
            ckpt,
        } => commands::translate(&common, &run, &input, domain.as_deref(), &ckpt, out),
        Command::Evaluate { hyp, reference, .. } => {
            let bleu = commands::bleu_files(&hyp, &reference)?;
            writeln!(out, "{bleu:.2}").map_err(commands::stdout_err)
        }
        Command::Report { runs, .. } => commands::report(&runs, out),
    }
}
