use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lsn_cli::commands::{self, EvalArgs};
use lsn_cli::CliError;

#[derive(Parser)]
#[command(name = "lsn", version, about = "Linear span networks for skeleton detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic image/skeleton dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a network and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write the PR report.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "oracle_probs")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// Matching tolerance as a fraction of the image diagonal.
        #[arg(long)]
        tolerance: Option<f64>,
        /// Defaults to the config saved next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, hide = true)]
        oracle_probs: bool,
    },
    /// Residuals of the ground truth against each stage's side outputs.
    Analyze {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference check of every backward rule.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true, value_name = "OP")]
        inject_fault: Option<String>,
    },
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Synth { out, count, size, seed } => commands::synth(&out, count, size, seed),
        Command::Train { data, config, out, resume } => {
            commands::train(&data, &config, &out, resume.as_deref()).map(drop)
        }
        Command::Eval {
            data,
            ckpt,
            report,
            tolerance,
            config,
            oracle_probs,
        } => commands::eval(&EvalArgs {
            data: &data,
            ckpt: ckpt.as_deref(),
            report: &report,
            tolerance,
            config: config.as_deref(),
            oracle_probs,
        })
        .map(drop),
        Command::Analyze { data, ckpt, report, config } => {
            commands::analyze(&data, &ckpt, &report, config.as_deref()).map(drop)
        }
        Command::Gradcheck { seed, inject_fault } => commands::gradcheck(seed, inject_fault.as_deref()).map(drop),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
