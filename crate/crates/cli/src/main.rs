//! `herbrx`: synthesize data, fit therapy topics, train and evaluate
//! prescription models from the command line.
//!
//! Every command writes into `<out>/<command>-<digest>` and prints that
//! directory on stdout. Exit status is 0 on success, 1 for invalid input or
//! configuration and 2 for runtime failures.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use herbrx_core::Error;

use crate::config::{Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "herbrx", version, about = "Herbal prescription models from tongue images")]
struct Cli {
    /// TOML run configuration; flags override its fields.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for every random stream.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Parent directory of run directories.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "K")]
    fold: Option<usize>,
    #[arg(long, global = true, value_parser = ["1cnn", "2cnn", "2cnn-aux"])]
    variant: Option<String>,
    /// Grow the training pool with augmented copies.
    #[arg(long, global = true)]
    augment: bool,
    #[arg(long, global = true, value_parser = ["paper", "mini"])]
    preset: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the topic model on the training part of a fold.
    LdaFit,
    /// Train a prescription model on a fold.
    Train {
        /// Run directory of `lda-fit`; required for 2cnn-aux.
        #[arg(long, value_name = "DIR")]
        topics: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test part of a fold.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Run directory of `lda-fit`; enables kl_t and topic exports.
        #[arg(long, value_name = "DIR")]
        topics: Option<PathBuf>,
        /// Score the training labels against themselves instead of predicting.
        #[arg(long)]
        self_test: bool,
    },
    /// Write a synthetic planted-topic dataset.
    Synth,
    /// Write augmented copies of a fold's training images.
    Augment,
    /// Dataset statistics and herb frequencies.
    Stats,
    /// Aggregate eval runs into a mean ± std table.
    Report {
        #[arg(long, num_args = 1.., required = true, value_name = "DIR")]
        runs: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<PathBuf> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: cli.seed,
        out: cli.out,
        fold: cli.fold,
        variant: cli.variant,
        augment: cli.augment,
        preset: cli.preset,
    });
    cfg.validate()?;
    match &cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Stats => commands::stats(&cfg),
        Command::LdaFit => commands::lda_fit(&cfg),
        Command::Train { topics } => commands::train_cmd(&cfg, topics.as_deref()),
        Command::Eval { checkpoint, topics, self_test } => {
            commands::eval(&cfg, &commands::EvalArgs { checkpoint, topics: topics.as_deref(), self_test: *self_test })
        }
        Command::Augment => commands::augment(&cfg),
        Command::Report { runs } => commands::report(&cfg, runs),
    }
}

/// 1 for problems with the inputs, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::InvalidConfig { .. }
                | Error::InvalidArgument(_)
                | Error::UnknownHerbs(_)
                | Error::Alias(_)
                | Error::MissingTopics(_)
                | Error::SpecMismatch(_) => 1,
                _ => 2,
            };
        }
        if cause.is::<toml::de::Error>() {
            return 1;
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
