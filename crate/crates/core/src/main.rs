use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use nonlocal_ramsey::config::parse_config;
use nonlocal_ramsey::run::{run, RunError};

/// Nonlocal spatial growth solver and consumption optimizer.
#[derive(Debug, Parser)]
#[command(name = "nlramsey", version)]
struct Args {
    /// Path to a `key = value` run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for artifacts; overrides the `out` key.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured RNG seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let code = match execute(&args) {
        Ok(o) => {
            for line in &o.lines {
                println!("{line}");
            }
            o.exit_code()
        }
        Err(e) => {
            eprintln!("nlramsey: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}

fn execute(args: &Args) -> Result<nonlocal_ramsey::run::RunOutcome, RunError> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| RunError::Io { path: args.config.clone(), message: e.to_string() })?;
    let mut cfg = parse_config(&text).map_err(|e| RunError::Config(e.to_string()))?;
    cfg.base_dir = args.config.parent().map(PathBuf::from).unwrap_or_default();
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    let out = args.out.clone().unwrap_or_else(|| cfg.resolve(&cfg.out));
    run(&cfg, &out)
}
