use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

/// Runs one stochastic LLB experiment described by a TOML config.
#[derive(Parser)]
#[command(version, about)]
struct Args {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `[output] dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; overrides the config and LLB_THREADS.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let code = llb_lab::run_cli(&args.config, args.out, args.threads);
    ExitCode::from(code as u8)
}
