use clap::Parser;
use std::path::PathBuf;
use tsalab::cli::{run, CliArgs};

/// Two-time-scale stochastic approximation lab.
///
/// The command to run (gen-system, theory, simulate, clt,
/// compare-schedules, tdc, bounds) is the `command` key of the config
/// file; outputs land in --out.
#[derive(Parser)]
#[command(name = "tsalab", version, about)]
struct Args {
    /// Path to the flat key = value config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: logical cores; TSALAB_WORKERS as fallback).
    #[arg(long)]
    workers: Option<usize>,
    /// Seed override for the config's seed key.
    #[arg(long)]
    seed: Option<u64>,
    /// Emit trace.csv for trial 0 every K steps (0 disables).
    #[arg(long, default_value_t = 0)]
    trace_stride: u64,
}

fn main() {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            // clap prints --help/--version through the error path too.
            if e.use_stderr() {
                eprintln!("{e}");
                std::process::exit(1);
            }
            print!("{e}");
            std::process::exit(0);
        }
    };
    let cli = CliArgs {
        config: args.config,
        out: args.out,
        workers: args.workers,
        seed: args.seed,
        trace_stride: args.trace_stride,
    };
    if let Err(e) = run(&cli) {
        eprintln!("tsalab: {e}");
        std::process::exit(e.exit_code());
    }
}
