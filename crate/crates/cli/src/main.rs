use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use delusion_core::noise::RefineFailure;
use delusion_core::ErrorKind;

mod commands;
mod config;

use commands::{audit, data, protocol, reporting};

#[derive(Parser)]
#[command(name = "delusion-audit", version, about = "Measure and mitigate high-belief hallucinations in chat models")]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Answer, score beliefs, classify errors and report.
    Audit(audit::AuditArgs),
    /// Re-ask baseline errors under the six honesty prompts.
    Honesty(protocol::HonestyArgs),
    /// Ask the model to reflect on its baseline answers.
    Reflect(protocol::ReflectArgs),
    /// Discard baseline answers that too few verifier models reproduce.
    Debate(protocol::DebateArgs),
    /// Audit with retrieval passages in the answer prompt.
    Rag(audit::AuditArgs),
    /// Synthesize a noisy fine-tuning set.
    NoiseGen(data::NoiseGenArgs),
    /// Remove training samples resembling known delusions.
    Refine(data::RefineArgs),
    /// Build a refusal fine-tuning set from a graded run.
    SftBuild(data::SftBuildArgs),
    /// Re-emit the report of a finished run.
    Report(reporting::ReportArgs),
    /// Compare two runs' reports.
    Compare(reporting::CompareArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<delusion_core::Error>() {
            return match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Transport => 3,
                ErrorKind::Data => 4,
            };
        }
        if let Some(f) = cause.downcast_ref::<RefineFailure>() {
            return match f.error.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Transport => 3,
                ErrorKind::Data => 4,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let ctx = match commands::Context::new(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let result = match cli.command {
        Command::Audit(a) => audit::run(&ctx, &a, false),
        Command::Rag(a) => audit::run(&ctx, &a, true),
        Command::Honesty(a) => protocol::honesty(&ctx, &a),
        Command::Reflect(a) => protocol::reflect(&ctx, &a),
        Command::Debate(a) => protocol::debate(&ctx, &a),
        Command::NoiseGen(a) => data::noise_gen(&ctx, &a),
        Command::Refine(a) => data::refine(&ctx, &a),
        Command::SftBuild(a) => data::sft_build(&ctx, &a),
        Command::Report(a) => reporting::report(&a),
        Command::Compare(a) => reporting::compare(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
