use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use mfrbsde::experiment::{run_config_text, Op};

/// Batch runner for mean-field reflected BSDE experiments on scenario lattices.
#[derive(Parser)]
#[command(name = "mfrbsde", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the operations listed in the config's `[run] ops`.
    Run(Common),
    /// Build the scenario lattice and write it out.
    Lattice(Common),
    /// Solve the plain BSDE.
    Solve(Common),
    /// Solve the reflected BSDE with an uncoupled obstacle.
    Reflect(Common),
    /// Solve the mean-field reflected BSDE by Picard iteration.
    Picard(Common),
    /// Probe declared constants, terminal consistency and the compensator.
    Validate(Common),
    /// Compare the solver with the exact tree oracle.
    OracleCheck(Common),
    /// Report Y_0 as the step count is refined.
    Refine(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides `params.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Caps the worker threads.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (op, common) = match cli.command {
        Command::Run(c) => (None, c),
        Command::Lattice(c) => (Some(Op::Lattice), c),
        Command::Solve(c) => (Some(Op::Solve), c),
        Command::Reflect(c) => (Some(Op::Reflect), c),
        Command::Picard(c) => (Some(Op::Picard), c),
        Command::Validate(c) => (Some(Op::Validate), c),
        Command::OracleCheck(c) => (Some(Op::OracleCheck), c),
        Command::Refine(c) => (Some(Op::Refine), c),
    };
    match run(op, &common) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(op: Option<Op>, c: &Common) -> anyhow::Result<ExitCode> {
    if let Some(t) = c.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    let text = std::fs::read_to_string(&c.config).with_context(|| format!("reading {}", c.config.display()))?;
    let ops = op.map(|o| vec![o]);
    match run_config_text(&text, ops.as_deref(), c.seed, &c.out) {
        Ok(outputs) => {
            if c.verbose > 0 {
                for name in outputs.keys() {
                    eprintln!("wrote {}", c.out.join(name).display());
                }
                if c.verbose > 1 {
                    if let Some(summary) = outputs.get("picard_summary.txt") {
                        eprint!("{summary}");
                    }
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            eprintln!("{e}");
            Ok(ExitCode::from(e.exit_code() as u8))
        }
    }
}
