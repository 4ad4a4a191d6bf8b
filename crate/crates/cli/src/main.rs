// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};
use slrtm::Error;

use crate::args::{resolve, Cli, Command};

/// 1 configuration, 2 input/output, 3 numerical failure, 4 checkpoint or
/// vocabulary mismatch.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Parse { .. } => 2,
        Error::NonFinite(_) => 3,
        Error::VocabularyMismatch { .. } | Error::Checkpoint(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(u8::from(e.use_stderr()));
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let (_, sub) = matches.subcommand().expect("a subcommand is required");
    let result = resolve(&cli.command, sub).and_then(|(cfg, explicit)| match cli.command {
        Command::Train(_) => commands::train(cfg),
        Command::Perplexity(_) => commands::perplexity_cmd(cfg, explicit),
        Command::Docvec(_) => commands::docvec(cfg, explicit),
        Command::Classify(_) => commands::classify(cfg, explicit),
        Command::Generate(_) => commands::generate(cfg),
        Command::Topwords(_) => commands::topwords(cfg),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
