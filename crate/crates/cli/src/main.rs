//! `cbodd`: corpus generation, training, evaluation and verification.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use cbodd_core::config::Variant;
use cbodd_core::data::DomainMix;
use cbodd_core::eval::Protocol;
use cbodd_core::Error;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cbodd", version, about = "Multi-branch orthogonally disentangled deepfake detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic two-domain corpus (PPM frames plus manifest).
    Datagen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        clips: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// A, B or both
        #[arg(long, default_value = "both")]
        domain: DomainMix,
    },
    /// Train on the training-domain split of a corpus.
    Train {
        /// Run configuration (TOML); built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trained model under the within- or cross-domain protocol.
    Eval {
        /// Checkpoint written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        protocol: Protocol,
        #[arg(long)]
        report: PathBuf,
        /// Ablation variant the checkpoint was trained as (default FULL).
        #[arg(long)]
        variant: Option<Variant>,
        /// Defaults to `config.toml` next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference verification of every op and loss term.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Add this offset to every analytic derivative (negative control).
        #[arg(long, hide = true)]
        inject_fault: Option<f64>,
    },
    /// Dump shared and disentangled vectors of every frame as CSV.
    ExportEmbeddings {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the canonical default run configuration.
    PrintConfig {
        /// Published embedding sizes instead of the desk profile.
        #[arg(long)]
        paper_scale: bool,
    },
    /// Parameter count per module and in total.
    ReportParams {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Process exit status for a pipeline error.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Input(_) | Error::Label(_) | Error::Leakage(_) | Error::Completeness(_) | Error::Metric(_) | Error::Io(_) => 2,
        Error::Data(_) | Error::Format(_) => 3,
        Error::Numeric(_) => 4,
        Error::Mismatch(_) => 5,
        Error::Dimension { .. } | Error::Rank { .. } | Error::State(_) | Error::Batch(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Datagen {
            out,
            seed,
            clips,
            frames,
            size,
            domain,
        } => commands::datagen(&out, seed, clips, frames, size, domain),
        Command::Train { config, data, out } => commands::train(config.as_deref(), &data, &out),
        Command::Eval {
            model,
            data,
            protocol,
            report,
            variant,
            config,
        } => commands::eval(&model, &data, protocol, &report, variant, config.as_deref()),
        Command::Gradcheck { seed, inject_fault } => match commands::gradcheck(seed, inject_fault) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(6),
            Err(e) => Err(e),
        },
        Command::ExportEmbeddings { model, data, out, config } => commands::export_embeddings(&model, &data, &out, config.as_deref()),
        Command::PrintConfig { paper_scale } => {
            commands::print_config(paper_scale);
            Ok(())
        }
        Command::ReportParams { config } => commands::report_params(config.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
