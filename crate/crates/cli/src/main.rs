use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use moesplat::{run, CliError, Command, Overrides, RunConfig};
use moesplat_core::experts::ExpertKind;

/// Mixture-of-experts dynamic Gaussian splatting.
///
/// Exit codes: 0 success, 2 configuration error, 3 data error,
/// 4 numerical failure. `MOESPLAT_THREADS` caps the worker threads.
#[derive(Parser)]
#[command(name = "moesplat", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dynamic scene
    Synth(Args),
    /// Train experts, then the router
    Train(Args),
    /// Render views of a checkpoint
    Render(Args),
    /// Prune a checkpoint by gate-aware importance
    Prune(Args),
    /// Distill a mixture into one expert
    Distill(Args),
    /// Evaluate a checkpoint
    Eval(Args),
    /// Compare experts and router variants
    Ablate(Args),
}

#[derive(Clone, Copy, ValueEnum)]
enum Student {
    Polynomial,
    Keyframe,
    Deform,
}

#[derive(clap::Args)]
struct Args {
    /// Run configuration (TOML); defaults are used when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Model directory to read
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Scene directory written by `synth`
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Comma-separated view indices
    #[arg(long, value_delimiter = ',')]
    views: Option<Vec<usize>>,
    /// Render all experts in one merged pass
    #[arg(long)]
    single_pass: bool,
    /// Write render work counters
    #[arg(long)]
    stats: bool,
    #[arg(long, value_enum)]
    student: Option<Student>,
}

fn execute(command: Command, args: Args) -> Result<(), CliError> {
    if let Ok(n) = std::env::var("MOESPLAT_THREADS") {
        let n: usize = n
            .parse()
            .map_err(|_| CliError::Config(format!("MOESPLAT_THREADS={n} is not a thread count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let overrides = Overrides {
        seed: args.seed,
        out: args.out,
        checkpoint: args.checkpoint,
        scene: args.scene,
        views: args.views,
        single_pass: args.single_pass,
        stats: args.stats,
        student: args.student.map(|s| match s {
            Student::Polynomial => ExpertKind::Polynomial,
            Student::Keyframe => ExpertKind::Keyframe,
            Student::Deform => ExpertKind::Deform,
        }),
    };
    let cfg = overrides.apply(cfg);
    let manifest = run(command, &cfg)?;
    println!("{}: wrote {} files to {}", manifest.command, manifest.files.len(), cfg.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::Synth(a) => (Command::Synth, a),
        Cmd::Train(a) => (Command::Train, a),
        Cmd::Render(a) => (Command::Render, a),
        Cmd::Prune(a) => (Command::Prune, a),
        Cmd::Distill(a) => (Command::Distill, a),
        Cmd::Eval(a) => (Command::Eval, a),
        Cmd::Ablate(a) => (Command::Ablate, a),
    };
    match execute(command, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
