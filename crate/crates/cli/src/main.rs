//! `routh` — simulate, verify, and sweep symmetric Lagrangian systems.
//!
//! Exit codes: 0 on success, 1 when a run or a verification fails,
//! 2 on usage or configuration errors.

mod checks;
mod config;
mod run;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use run::{RunConfig, RunMode};

/// Failure classes mapped to process exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Exit 2: the invocation or configuration is malformed.
    Usage(String),
    /// Exit 1: the run or a verification failed.
    Run(String),
}

pub type AppResult<T> = Result<T, Failure>;

pub fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

pub fn failure(msg: impl Into<String>) -> Failure {
    Failure::Run(msg.into())
}

#[derive(Parser)]
#[command(
    name = "routh",
    version,
    about = "Integrate and verify Lagrangian systems with symmetry at a fixed momentum level"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Integrate one system and write a trajectory (CSV) plus a summary (JSON)
    Simulate(SimulateArgs),
    /// Run the library's invariant suites on one system and report pass/fail per property
    Check(CheckArgs),
    /// Repeat a simulation over a grid of one scalar parameter (h, T, or mu<k>)
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Builtin system name or path to a JSON system file
    #[arg(long)]
    system: String,
    /// Momentum level, comma-separated (default: the level of the initial state)
    #[arg(long)]
    mu: Option<String>,
    /// full | reduced | both (both also reconstructs and reports the gap)
    #[arg(long, default_value = "full")]
    mode: String,
    /// Step size
    #[arg(long, default_value_t = 1e-3)]
    h: f64,
    /// Final time
    #[arg(long = "T", default_value_t = 1.0)]
    t_end: f64,
    /// Initial natural state q,v,p (3n comma-separated reals; default per family)
    #[arg(long)]
    state: Option<String>,
    /// Trajectory CSV path
    #[arg(long, default_value = "trajectory.csv")]
    out: PathBuf,
    /// Summary JSON path
    #[arg(long, default_value = "summary.json")]
    summary: PathBuf,
    /// Seed reserved for sampling-based verification
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Re-read the trajectory file and verify Dirac membership row by row
    #[arg(long)]
    check_dirac: bool,
}

#[derive(Args)]
struct CheckArgs {
    /// Builtin system name or path to a JSON system file
    #[arg(long)]
    system: String,
    /// Momentum level, comma-separated (default per family)
    #[arg(long)]
    mu: Option<String>,
    /// Seed for the sampled states and jets
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    /// Builtin system name or path to a JSON system file
    #[arg(long)]
    system: String,
    /// Momentum level, comma-separated (default: the level of the initial state)
    #[arg(long)]
    mu: Option<String>,
    /// full | reduced | both
    #[arg(long, default_value = "full")]
    mode: String,
    /// Step size (overridden per run when --param h)
    #[arg(long, default_value_t = 1e-3)]
    h: f64,
    /// Final time (overridden per run when --param T)
    #[arg(long = "T", default_value_t = 1.0)]
    t_end: f64,
    /// Parameter to sweep: h, T, or mu<k> (e.g. mu0)
    #[arg(long)]
    param: String,
    /// Comma-separated grid values for the swept parameter
    #[arg(long)]
    values: String,
    /// Trajectory path template; must contain {i} when there are several values
    #[arg(long, default_value = "sweep-{i}.csv")]
    out: String,
    /// Summary path template; must contain {i} when there are several values
    #[arg(long, default_value = "sweep-{i}.json")]
    summary: String,
    /// Seed reserved for sampling-based verification
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Verify Dirac membership of every run's trajectory file
    #[arg(long)]
    check_dirac: bool,
}

fn parse_floats(what: &str, text: &str) -> AppResult<Vec<f64>> {
    text.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|e| usage(format!("{what}: bad number {x:?}: {e}")))
        })
        .collect()
}

fn parse_mu(mu: &Option<String>) -> AppResult<Option<Vec<f64>>> {
    Ok(match mu {
        Some(text) => Some(parse_floats("--mu", text)?),
        None => None,
    })
}

fn dispatch(cli: Cli) -> AppResult<()> {
    match cli.cmd {
        Cmd::Simulate(a) => {
            let cfg = RunConfig {
                system: a.system,
                mu: parse_mu(&a.mu)?,
                mode: RunMode::parse(&a.mode)?,
                h: a.h,
                t_end: a.t_end,
                state: match &a.state {
                    Some(text) => Some(parse_floats("--state", text)?),
                    None => None,
                },
                out: a.out,
                summary: a.summary,
                seed: a.seed,
                check_dirac: a.check_dirac,
            };
            run::simulate(&cfg)
        }
        Cmd::Check(a) => checks::run_check(&a.system, parse_mu(&a.mu)?, a.seed),
        Cmd::Sweep(a) => {
            let mu = parse_mu(&a.mu)?;
            let values = parse_floats("--values", &a.values)?;
            run::sweep(run::SweepConfig {
                system: a.system,
                mu,
                mode: RunMode::parse(&a.mode)?,
                h: a.h,
                t_end: a.t_end,
                param: a.param,
                values,
                out_template: a.out,
                summary_template: a.summary,
                seed: a.seed,
                check_dirac: a.check_dirac,
            })
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    };
    std::process::exit(code);
}
