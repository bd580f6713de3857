use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use riccati_lqr_cli::{cmd_solve, cmd_sweep, cmd_verify, configure_threads, parse_override, RunOptions};

/// Finite-horizon LQR workbench: Riccati solvers, closed-loop synthesis and
/// identity checks for parabolic boundary-control problems.
#[derive(Parser)]
#[command(name = "riccati-lqr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Problem configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Tolerance override, repeatable.
    #[arg(long = "tol-override", value_name = "KEY=VAL", value_parser = parse_pair)]
    tol_override: Vec<(String, f64)>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve both Riccati forms, the closed loop and one optimal pair.
    Solve(Common),
    /// Run verification suites; exits nonzero if any check fails.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Comma-separated suite names; all suites when omitted.
        #[arg(long, value_delimiter = ',')]
        suites: Vec<String>,
        /// Shift the checked Riccati solution by this multiple of the identity.
        #[arg(long, default_value_t = 0.0)]
        perturb: f64,
    },
    /// Refinement or parameter sweep with observed orders.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// node_count, state_dim or alpha.
        #[arg(long)]
        parameter: String,
        /// Comma-separated parameter values (at least three, monotone).
        #[arg(long, value_delimiter = ',', required = true)]
        ladder: Vec<f64>,
    },
}

fn parse_pair(s: &str) -> Result<(String, f64), String> {
    parse_override(s).map_err(|e| e.to_string())
}

fn options(c: Common) -> RunOptions {
    RunOptions {
        config: c.config,
        out: c.out,
        seed: c.seed,
        tol_overrides: c.tol_override,
        ..RunOptions::default()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Solve(c) => cmd_solve(&options(c)),
        Command::Verify {
            common,
            suites,
            perturb,
        } => cmd_verify(&RunOptions {
            suites,
            perturb,
            ..options(common)
        }),
        Command::Sweep {
            common,
            parameter,
            ladder,
        } => cmd_sweep(&RunOptions {
            parameter: Some(parameter),
            ladder,
            ..options(common)
        }),
    };
    match result {
        Ok(outcome) => {
            print!("{}", outcome.text);
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
