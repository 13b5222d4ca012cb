//! `dsr`: command-line front end for depth map super-resolution.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{DegradeFlags, EvalFlags, GradcheckFlags, RefineFlags, SrFlags, TrainFlags};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numerical(String),
}

#[derive(Parser)]
#[command(name = "dsr", version, about = "Depth map super-resolution toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Bicubic-downsample a depth map, optionally adding depth-dependent noise.
    Degrade(DegradeFlags),
    /// Train a cascade on the patches of a dataset manifest.
    Train(TrainFlags),
    /// Super-resolve one depth map: cascade, then optional fusion, then optional refinement.
    Sr(SrFlags),
    /// Score every prediction against its ground truth and write a CSV report.
    Eval(EvalFlags),
    /// Total-variation refinement of a depth map.
    Refine(RefineFlags),
    /// Finite-difference check of every backward pass.
    Gradcheck(GradcheckFlags),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<CliError>() {
        return match e {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 3,
        };
    }
    if let Some(e) = err.downcast_ref::<depthsr::Error>() {
        return if e.is_numerical() {
            3
        } else if e.is_data() {
            2
        } else {
            1
        };
    }
    2
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("DSR_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("DSR_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Degrade(f) => commands::degrade(&f),
        Command::Train(f) => commands::train(&f),
        Command::Sr(f) => commands::sr(&f),
        Command::Eval(f) => commands::eval(&f),
        Command::Refine(f) => commands::refine(&f),
        Command::Gradcheck(f) => commands::gradcheck(&f),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
