//! Thin command-line front end over the library: `run`, `validate` and
//! `compare`. Exit codes: 0 success, 2 invalid configuration, 3 numerical
//! failure.

use clap::{Parser, Subcommand};
use sbs_sim::cli::{compare, run, ResultBundle, RunConfig};
use sbs_sim::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "sbs-sim", about = "Spin-dependent beam-splitter simulator")]
struct Args {
    #[command(subcommand)]
    command: Command,
    /// Worker threads for grid scans (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a TOML config and write its outputs.
    Run { config: PathBuf },
    /// Parse and validate a config without running it.
    Validate { config: PathBuf },
    /// RMSE comparison of two result bundles (directories or bundle.json).
    Compare { a: PathBuf, b: PathBuf },
}

fn main() -> ExitCode {
    env_logger::init();
    let args = Args::parse();
    if let Some(n) = args.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_)
                | Error::InvalidSpace(_)
                | Error::InvalidNoise(_)
                | Error::Io(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}

fn dispatch(cmd: Command) -> sbs_sim::Result<()> {
    match cmd {
        Command::Run { config } => {
            let cfg = RunConfig::from_path(&config)?;
            let bundle = run(&cfg)?;
            println!(
                "wrote {} table(s) to {}",
                bundle.tables.len(),
                cfg.out_dir().display()
            );
            for t in &bundle.tables {
                println!("  {} ({} rows)", t.name, t.rows.len());
            }
            Ok(())
        }
        Command::Validate { config } => {
            let cfg = RunConfig::from_path(&config)?;
            cfg.validate()?;
            println!("valid: {config:?}");
            Ok(())
        }
        Command::Compare { a, b } => {
            let ba = ResultBundle::read(&a)?;
            let bb = ResultBundle::read(&b)?;
            let report = compare(&ba, &bb)?;
            println!("table, rmse, rmse_pct_of_range");
            for (name, rmse, frac) in &report.tables {
                println!("{name}, {rmse:.6e}, {:.2}%", 100.0 * frac);
            }
            Ok(())
        }
    }
}
