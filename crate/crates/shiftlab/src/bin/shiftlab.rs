//! Command-line entry point for the test-time adaptation lab.
//!
//! Five subcommands cover the workflow: `pretrain` fits the source
//! classifier, `intermediate` trains the refiner against it, `adapt`
//! replays one shifted stream, `sweep` grids methods x shifts x seeds,
//! and `toy-verify` checks the closed-form theory against Monte Carlo.
//! Exit codes: 0 success, 1 configuration or I/O problems, 2 failed
//! verification, 3 numerical breakdown.

use clap::{Args, Parser, Subcommand};
use shiftlab::harness;
use shiftlab::refiner::RefinerVariant;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "shiftlab", version, about = "Test-time adaptation lab on synthetic label shift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source classifier and write model.json.
    Pretrain(Common),
    /// Train the prediction refiner against a stored model.
    Intermediate {
        #[command(flatten)]
        common: Common,
        /// Refiner architecture; overrides the config.
        #[arg(long, value_enum)]
        variant: Option<Variant>,
    },
    /// Replay one shifted stream with the configured method.
    Adapt(Common),
    /// Check the closed-form confusion theory against Monte Carlo.
    ToyVerify(Common),
    /// Grid of methods x refine x shifts x seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Worker threads for the grid cells.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Variant {
    Unified,
    Split,
}

impl From<Variant> for RefinerVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Unified => RefinerVariant::Unified,
            Variant::Split => RefinerVariant::Split,
        }
    }
}

fn run(cli: Cli) -> shiftlab::error::Result<()> {
    match cli.command {
        Command::Pretrain(c) => harness::cmd_pretrain(c.config.as_deref(), &c.out, c.seed),
        Command::Intermediate { common: c, variant } => harness::cmd_intermediate(
            c.config.as_deref(),
            &c.out,
            c.seed,
            variant.map(RefinerVariant::from),
        ),
        Command::Adapt(c) => harness::cmd_adapt(c.config.as_deref(), &c.out, c.seed),
        Command::ToyVerify(c) => harness::cmd_toy_verify(c.config.as_deref(), &c.out, c.seed),
        Command::Sweep { common: c, jobs } => {
            harness::cmd_sweep(c.config.as_deref(), &c.out, c.seed, jobs)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version to stdout with success; real usage
            // errors land on stderr with exit code 1
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
