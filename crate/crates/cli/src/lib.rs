//! Config-driven experiment runner.
//!
//! `llb-lab --config <path> [--out <dir>] [--threads <n>]` runs one
//! experiment and writes CSV/JSON outputs plus `manifest.json`. The thread
//! count comes from `--threads`, then the config's `threads`, then the
//! `LLB_THREADS` environment variable, then the number of cores. Results do not
//! depend on it.
//!
//! Exit codes: 0 success, 1 validation checks failed, 2 config or input
//! error, 3 numerical blow-up, 4 I/O error. Failures write `error.json` to the
//! output directory when it is known and always print it to stderr.

pub mod config;
pub mod runner;

use std::fs;
use std::path::{Path, PathBuf};

pub use config::{parse_config, ConfigError, ExperimentConfig, Kind};
pub use runner::{run, Outcome, RunError};

pub const THREADS_ENV: &str = "LLB_THREADS";

fn threads_from_env() -> Result<Option<usize>, ConfigError> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(ConfigError {
                errors: vec![format!("{THREADS_ENV}: must be a positive integer, got \"{v}\"")],
            }),
        },
    }
}

fn report_failure(err: &RunError, out_dir: Option<&Path>) {
    let record = err.to_json();
    let text = serde_json::to_string_pretty(&record).expect("json value");
    if let Some(dir) = out_dir {
        if fs::create_dir_all(dir).is_ok() {
            let _ = fs::write(dir.join("error.json"), format!("{text}\n"));
        }
    }
    eprintln!("{text}");
}

/// Full command-line flow; returns the process exit code.
pub fn run_cli(config_path: &Path, out: Option<PathBuf>, threads: Option<usize>) -> i32 {
    let text = match fs::read_to_string(config_path) {
        Ok(t) => t,
        Err(e) => {
            let err = RunError::Io(format!("{}: {e}", config_path.display()));
            report_failure(&err, out.as_deref());
            return err.exit_code();
        }
    };
    let base = config_path.parent().unwrap_or(Path::new("."));
    let cfg = match parse_config(&text, base) {
        Ok(c) => c,
        Err(e) => {
            let err = RunError::Config(e);
            report_failure(&err, out.as_deref());
            return err.exit_code();
        }
    };
    let out_dir = out.unwrap_or_else(|| cfg.output_dir.clone());
    let threads = match threads.or(cfg.threads).map(|t| Ok(Some(t))).unwrap_or_else(threads_from_env) {
        Ok(t) => t,
        Err(e) => {
            let err = RunError::Config(e);
            report_failure(&err, Some(&out_dir));
            return err.exit_code();
        }
    };
    if threads == Some(0) {
        let err = RunError::Config(ConfigError {
            errors: vec!["--threads: must be at least 1".into()],
        });
        report_failure(&err, Some(&out_dir));
        return err.exit_code();
    }
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            let err = RunError::Io(format!("thread pool: {e}"));
            report_failure(&err, Some(&out_dir));
            return err.exit_code();
        }
    };
    match pool.install(|| run(&cfg, &out_dir, pool.current_num_threads())) {
        Ok(Outcome::Completed) => 0,
        Ok(outcome @ Outcome::ValidationFailed(_)) => {
            if let Outcome::ValidationFailed(names) = &outcome {
                eprintln!("validation failed: {}", names.join(", "));
            }
            outcome.exit_code()
        }
        Err(err) => {
            report_failure(&err, Some(&out_dir));
            err.exit_code()
        }
    }
}
