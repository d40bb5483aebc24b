//! `confkv`: decode runs, policy comparisons, parameter sweeps and the
//! context-ablation experiment over the confidence-gated KV cache.
//!
//! Exit codes: 0 on success, 1 for usage or config errors, 2 for runtime
//! failures. Messages go to standard error.

mod args;
mod commands;
mod output;
mod setup;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};
use setup::UsageError;

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<confkv_core::Error>() {
        Some(confkv_core::Error::ConfigParse(_) | confkv_core::Error::Invariant(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match &cli.command {
        Command::Decode(a) => commands::decode(a),
        Command::Compare(a) => commands::compare(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::GenTrace(a) => commands::gen_trace(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
