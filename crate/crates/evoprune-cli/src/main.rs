//! `evoprune` — batch front end for the channel-pruning toolkit.
//!
//! One JSON config per run; flags only override the seed and the output
//! directory. Exit codes: 0 success, 1 validation error, 2 runtime error.

use clap::Parser;
use evoprune_cli::{config, run};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "evoprune", about = "Channel pruning runs driven by a JSON config")]
struct Args {
    /// Path to the run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let mut cfg = match config::parse_config(&args.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    run::apply_overrides(&mut cfg, args.seed, args.out);

    if let Some(workers) = cfg.max_workers {
        // Ignore failure: the global pool may already exist under test.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }

    match run::run(&cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(run::exit_code(&e) as u8)
        }
    }
}
