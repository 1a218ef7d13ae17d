//! `speechproj`: one subcommand per pipeline stage.
//!
//! Config comes from `--config` (or `SPEECHPROJ_CONFIG`), then `--set
//! section.field=value` and `--section.field value` overrides, in that order.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use speechproj_core::Error;

#[derive(Parser, Debug)]
#[command(name = "speechproj", version, about = "Two-stage speech projector experiments on toy backbones")]
struct Cli {
    /// Experiment config (TOML). Defaults apply when absent.
    #[arg(long, global = true, env = "SPEECHPROJ_CONFIG")]
    config: Option<PathBuf>,

    /// Override a config field, e.g. `--set stage1.alpha=7`.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    overrides: Vec<String>,

    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus.
    Synth,
    /// Pretrain the toy decoder on the repeat task and freeze it.
    PretrainDecoder,
    /// Stage 1: padded-MSE pretraining of the projector.
    Pretrain(ResumeArgs),
    /// Stage 2: adaptation against the frozen decoder.
    Adapt(AdaptArgs),
    /// Embedding noise probe and the derived stage-1 MSE target.
    Probe,
    /// Held-out WER/CER.
    Eval(EvalArgs),
    /// Decode one transcript.
    Decode(DecodeArgs),
    /// Adapt and evaluate at several σ values.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct ResumeArgs {
    /// Continue from the newest checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct AdaptArgs {
    #[arg(long)]
    sigma: Option<f64>,
    /// Start from a freshly initialised projector instead of stage 1.
    #[arg(long)]
    from_scratch: bool,
    #[command(flatten)]
    resume: ResumeArgs,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    Stage1,
    Stage2,
    Oracle,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_enum, default_value = "stage2")]
    stage: Stage,
    /// σ of the stage-2 checkpoint to evaluate.
    #[arg(long)]
    sigma: Option<f64>,
    /// Score hypotheses without normalisation.
    #[arg(long)]
    raw: bool,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    text: String,
    /// Feed the transcript's clean embeddings instead of projected speech.
    #[arg(long)]
    oracle: bool,
    #[arg(long, value_enum, default_value = "stage2")]
    stage: Stage,
    #[arg(long)]
    sigma: Option<f64>,
    /// Seed of the synthesised utterance.
    #[arg(long, default_value_t = 0)]
    sample_seed: u64,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.9, 1.0])]
    sigmas: Vec<f64>,
}

/// Moves `--section.field value` and `--section.field=value` into `--set`.
fn lift_dotted_flags(args: Vec<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(args.len());
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--").filter(|f| f.contains('.') && !f.starts_with('.')) else {
            out.push(a);
            continue;
        };
        let pair = if flag.contains('=') {
            flag.to_string()
        } else {
            match it.next() {
                Some(v) => format!("{flag}={v}"),
                None => {
                    out.push(a);
                    continue;
                }
            }
        };
        out.push("--set".into());
        out.push(pair);
    }
    out
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return 1;
    };
    match e {
        Error::Config { .. } | Error::Argument(_) | Error::Vocabulary(_) | Error::Range(_) => 2,
        Error::Prerequisite(_) | Error::IncompatibleCheckpoint(_) => 3,
        Error::Numeric { .. } | Error::TrainingFailure { .. } | Error::Contract(_) => 4,
        Error::Io(_) | Error::Truncated(_) | Error::StaleCache(_) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse_from(lift_dotted_flags(std::env::args().collect()));
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lift(args: &[&str]) -> Vec<String> {
        lift_dotted_flags(args.iter().map(|s| s.to_string()).collect())
    }

    #[test]
    fn dotted_flags_become_overrides() {
        assert_eq!(
            lift(&["x", "--stage1.alpha", "7", "pretrain", "--stage2.sigma=0"]),
            ["x", "--set", "stage1.alpha=7", "pretrain", "--set", "stage2.sigma=0"]
        );
        assert_eq!(lift(&["x", "--force", "--config", "a.toml"]), ["x", "--force", "--config", "a.toml"]);
    }

    #[test]
    fn error_kinds_map_to_exit_codes() {
        let code = |e: Error| exit_code(&anyhow::Error::from(e));
        assert_eq!(code(Error::config("a", "b")), 2);
        assert_eq!(code(Error::Prerequisite("x".into())), 3);
        assert_eq!(code(Error::Numeric { message: "nan".into(), last_checkpoint: None }), 4);
        assert_eq!(code(Error::Io(std::io::Error::other("x"))), 5);
        assert_eq!(exit_code(&anyhow::anyhow!("plain")), 1);
    }
}
