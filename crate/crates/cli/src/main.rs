//! `fg` — experiment driver for the focal-guidance toy stack.
//!
//! Subcommands: synth | profile | train | sample | score. Every run
//! writes its artifacts under `--out` together with exactly one
//! `manifest.json`; rerunning with `--replay manifest.json` reproduces
//! the outputs bit-identically.

mod commands;
mod manifest;

use clap::{Parser, Subcommand};
use fg_core::Error;

#[derive(Parser)]
#[command(name = "fg", version, about = "focal-guidance experiment driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene into latents, tokens, and ground truth.
    Synth(commands::SynthArgs),
    /// Profile per-layer semantic responsiveness over sampling steps.
    Profile(commands::ProfileArgs),
    /// Train the toy model on synthesized data with a layer mask.
    Train(commands::TrainArgs),
    /// Sample a latent video, optionally with focal guidance.
    Sample(commands::SampleArgs),
    /// Score prompt cases against synthesized ground truth.
    Score(commands::ScoreArgs),
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Shape(_) => 2,
        Error::Numeric(_) | Error::DegenerateVector => 3,
        Error::Io(_) | Error::Format(_) => 4,
    }
}

fn main() {
    if let Ok(v) = std::env::var("FG_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => fg_core::par::limit_threads(n),
            _ => {
                eprintln!("error: FG_THREADS must be a positive integer");
                std::process::exit(2);
            }
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => commands::run_synth(args),
        Command::Profile(args) => commands::run_profile(args),
        Command::Train(args) => commands::run_train(args),
        Command::Sample(args) => commands::run_sample(args),
        Command::Score(args) => commands::run_score(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
