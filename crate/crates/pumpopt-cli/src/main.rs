use clap::Parser;
use pumpopt::cli_io::{run, Mode, RunConfig, RunError};
use std::path::PathBuf;
use std::process::ExitCode;

/// Peristaltic pump solver and shape optimizer.
#[derive(Parser, Debug)]
#[command(name = "pumpopt", version)]
struct Args {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// solve, optimize, check-gradient or sample-field.
    #[arg(long)]
    mode: Option<Mode>,
    /// Output directory.
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override a configuration key, e.g. `--set solver.m=128`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn load(args: &Args) -> Result<RunConfig, RunError> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path, &args.overrides)?,
        None => RunConfig::from_toml_with_overrides("", &args.overrides)?,
    };
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    if let Some(o) = &args.out {
        cfg.out = o.clone();
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = load(&args).and_then(|cfg| run(&cfg));
    match result {
        Ok(summary) => {
            println!("{}", summary.message);
            for f in &summary.files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("pumpopt: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
