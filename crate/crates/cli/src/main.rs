use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use powerdensity_cli::{evaluate, exit, run, CliError, Command, LoadedConfig, RunOptions};

/// Simulates power-density data on a conformally flattened surface and
/// reconstructs the anisotropic conductivity from it.
#[derive(Debug, Parser)]
#[command(name = "pdrecon", version)]
struct Args {
    /// Worker threads (default: all cores). Ignored with --reference.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Single-threaded, byte-reproducible run without timing output.
    #[arg(long, global = true)]
    reference: bool,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Simulate the four potentials and export the dataset.
    Forward(PipelineArgs),
    /// Reconstruct from an exported dataset.
    Reconstruct {
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Artifact directory with mesh/ and dataset/ (default: the output directory).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Compare two conductivity exports.
    Evaluate {
        /// Directory with nodes.csv and triangles.csv.
        #[arg(long)]
        mesh: PathBuf,
        /// gamma.csv, or a directory with gamma.csv or xi/zeta/s.csv.
        truth: PathBuf,
        recon: PathBuf,
    },
    /// Forward simulation, checks, reconstruction and evaluation.
    Full(PipelineArgs),
}

#[derive(Debug, clap::Args)]
struct PipelineArgs {
    /// Run configuration (TOML).
    config: PathBuf,
    /// Output directory, overriding the config.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let threads = if args.reference { 1 } else { args.threads.unwrap_or(0) };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        log::warn!("could not configure the thread pool: {e}");
    }
    match execute(args) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(args: Args) -> Result<(), CliError> {
    let (pipeline, input, command) = match args.command {
        Cmd::Evaluate { mesh, truth, recon } => {
            let report = evaluate(&mesh, &truth, &recon)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            return Ok(());
        }
        Cmd::Forward(p) => (p, None, Command::Forward),
        Cmd::Reconstruct { pipeline, input } => (pipeline, input, Command::Reconstruct),
        Cmd::Full(p) => (p, None, Command::Full),
    };
    let cfg = LoadedConfig::from_file(&pipeline.config)?;
    let opts = RunOptions {
        reference: args.reference,
        output: pipeline.output,
        input,
    };
    let summary = run(&cfg, &opts, command)?;
    if let Some(e) = &summary.errors {
        log::info!(
            "relative L2 errors: xi {:.3e}, zeta {:.3e}, s {:.3e}",
            e.xi.relative_l2,
            e.zeta.relative_l2,
            e.s.relative_l2
        );
    }
    Ok(())
}
