//! `csd`: synthesis, training, inference, evaluation and reports for
//! context-sensitive decomposition enhancement networks.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical abort.

mod ablate;
mod common;
mod infer;
mod params;
mod synth;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "csd", version, about = "Low-light image enhancement by context-sensitive decomposition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic low/normal/illumination triples and manifests.
    Synth(synth::SynthArgs),
    /// Train a model on paired or unpaired data.
    Train(train::TrainArgs),
    /// Enhance images with a trained checkpoint.
    Enhance(infer::InferArgs),
    /// Write reflectance, illumination, enhanced and reconstructed images.
    Decompose(infer::InferArgs),
    /// Write the normalized illumination guidance map of each image.
    Guidance(infer::GuidanceArgs),
    /// Score a checkpoint (or the identity) on a paired manifest.
    Evaluate(infer::EvaluateArgs),
    /// Train and score every variant/guidance combination.
    Ablate(ablate::AblateArgs),
    /// Report parameter counts per layer and per preset.
    Params(params::ParamsArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => synth::run(a),
        Command::Train(a) => train::run(a),
        Command::Enhance(a) => infer::enhance(a),
        Command::Decompose(a) => infer::decompose(a),
        Command::Guidance(a) => infer::guidance(a),
        Command::Evaluate(a) => infer::evaluate_cmd(a),
        Command::Ablate(a) => ablate::run(a),
        Command::Params(a) => params::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
