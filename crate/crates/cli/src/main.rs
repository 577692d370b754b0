//! `reachkit` command-line front end.
//!
//! Exit codes: 0 success, 1 other failure, 2 parse or eligibility failure,
//! 3 extremality failure, 4 oracle gap above the bound, 5 certificate failure.

mod commands;
mod context;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Common, MintimeArgs, OracleArgs};

#[derive(Debug, Parser)]
#[command(name = "reachkit", version, about = "Minimum-time synthesis and reachable-set certificates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Normality, Lipschitz estimate and hypothesis flags of a system.
    Check {
        #[command(flatten)]
        common: Common,
    },
    /// Sampled reachable-set boundary as CSV.
    Boundary {
        #[command(flatten)]
        common: Common,
        /// Run nonlinear systems that fail the hypothesis flags.
        #[arg(long)]
        exploratory: bool,
    },
    /// Minimum time to the origin for query points.
    Mintime {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: MintimeArgs,
    },
    /// Convexity, contact exponent, inscribed ball and epigraph certificates as JSON.
    Certify {
        #[command(flatten)]
        common: Common,
        /// Run nonlinear systems that fail the hypothesis flags.
        #[arg(long)]
        exploratory: bool,
    },
    /// Bisection against the grid oracle on seeded random points.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: OracleArgs,
    },
    /// Closed-form checks on the bundled fixtures.
    Examples {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { context::PARSE } else { context::OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Check { common } => commands::check(common),
        Command::Boundary { common, exploratory } => commands::boundary(common, *exploratory),
        Command::Mintime { common, args } => commands::mintime(common, args),
        Command::Certify { common, exploratory } => commands::certify(common, *exploratory),
        Command::Oracle { common, args } => commands::oracle(common, args),
        Command::Examples { common } => commands::examples(common),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
