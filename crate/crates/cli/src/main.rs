//! `umlab`: command-line driver for masking, verification, pretraining,
//! reconstruction, benchmarking and mask statistics.
//!
//! Exit codes: 0 on success or pass, 1 on a verification failure or a
//! diverged run, 2 on usage and configuration errors.

mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{BenchArgs, MaskArgs, PretrainArgs, ReconstructArgs, StatsArgs, VerifyArgs};

#[derive(Parser, Debug)]
#[command(name = "umlab", version, about = "Uniform-masking MAE laboratory")]
struct Cli {
    /// Emit machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Force sequential reductions (the engine is single-threaded already).
    #[arg(long, global = true)]
    deterministic: bool,
    /// Log per-step progress to stderr.
    #[arg(long, global = true)]
    trace: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a mask plan and write it as JSON plus a PGM visualization.
    Mask(MaskArgs),
    /// Certify compact-input against full-masked encoder forwarding.
    Verify(VerifyArgs),
    /// Pretrain a model on a corpus and write a checkpoint and loss curve.
    Pretrain(PretrainArgs),
    /// Reconstruct one image with a checkpoint.
    Reconstruct(ReconstructArgs),
    /// Time UM-MAE and the mask-token baseline on one encoder config.
    Bench(BenchArgs),
    /// Visible-patch-per-window statistics of a sampling strategy.
    Stats(StatsArgs),
}

/// Global switches shared by every subcommand.
#[derive(Debug, Clone, Copy)]
pub struct Globals {
    pub json: bool,
    pub trace: bool,
}

/// Outcome of a subcommand that ran to completion.
pub enum Outcome {
    Ok,
    Failed,
}

fn threads_from_env() -> anyhow::Result<Option<usize>> {
    match std::env::var("UMM_THREADS") {
        Ok(v) => {
            let n: usize = v
                .parse()
                .map_err(|_| anyhow::anyhow!("UMM_THREADS must be a positive integer, got {v:?}"))?;
            if n == 0 {
                anyhow::bail!("UMM_THREADS must be a positive integer, got 0");
            }
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let globals = Globals {
        json: cli.json,
        trace: cli.trace,
    };
    let result = threads_from_env().and_then(|threads| {
        if cli.trace {
            eprintln!(
                "umlab: sequential engine (UMM_THREADS={}, deterministic={})",
                threads.map_or("unset".to_string(), |n| n.to_string()),
                cli.deterministic
            );
        }
        match cli.command {
            Command::Mask(a) => commands::mask(a, globals),
            Command::Verify(a) => commands::verify(a, globals),
            Command::Pretrain(a) => commands::pretrain(a, globals),
            Command::Reconstruct(a) => commands::reconstruct(a, globals),
            Command::Bench(a) => commands::bench(a, globals),
            Command::Stats(a) => commands::stats(a, globals),
        }
    });
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if matches!(e.downcast_ref::<umlab::Error>(), Some(umlab::Error::Diverged { .. })) {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
