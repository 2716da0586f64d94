//! The `qkalman` experiment driver.
//!
//! ```text
//! qkalman theory-sweep    --config exp.toml [--out theory.csv]
//! qkalman mc-sweep        --config exp.toml [--trials N] [--seed S]
//! qkalman optimize        --config exp.toml
//! qkalman validate-config --config exp.toml
//! ```
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 when the energy
//! optimization is infeasible, 1 for anything else.

pub mod commands;
pub mod config;
pub mod output;

pub use commands::Outcome;
pub use config::{ExperimentConfig, OptimizeMode};
pub use output::Table;

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Run(#[from] crate::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Run(_) | CliError::Io(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "qkalman",
    version,
    about = "Fixed-point Kalman filtering on unreliable memory"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Theoretical P*_{N|N} over the (m, e_tot) grid.
    TheorySweep(CommonArgs),
    /// Fault-injection Monte Carlo next to the theory over the grid.
    McSweep(CommonArgs),
    /// Minimum-energy allocation under the configured bound.
    Optimize(CommonArgs),
    /// Parse and check a config, then print it fully resolved.
    ValidateConfig(CommonArgs),
}

#[derive(Debug, Args, Clone)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// CSV destination (stdout if absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

impl Command {
    fn args(&self) -> &CommonArgs {
        match self {
            Command::TheorySweep(a) | Command::McSweep(a) | Command::Optimize(a) | Command::ValidateConfig(a) => a,
        }
    }

    fn verb(&self) -> &'static str {
        match self {
            Command::TheorySweep(_) => "theory-sweep",
            Command::McSweep(_) => "mc-sweep",
            Command::Optimize(_) => "optimize",
            Command::ValidateConfig(_) => "validate-config",
        }
    }
}

/// Loads the config and applies command-line overrides.
pub fn resolve(args: &CommonArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.trials {
        cfg.trials = t;
    }
    Ok(cfg)
}

/// Runs one command on a resolved config.
pub fn execute(verb: &str, cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    match verb {
        "theory-sweep" => commands::theory_sweep(cfg),
        "mc-sweep" => commands::mc_sweep(cfg),
        "optimize" => commands::optimize(cfg),
        "validate-config" => Ok(Outcome {
            table: Table::new(vec!["key".into(), "value".into()]),
            report: cfg.provenance().join("\n") + "\n",
            warnings: Vec::new(),
        }),
        other => Err(CliError::Config(format!("unknown command `{other}`"))),
    }
}

/// Full file contents for `outcome`: the resolved config as `#` lines, then
/// the CSV.
pub fn render(verb: &str, cfg: &ExperimentConfig, outcome: &Outcome) -> Result<Vec<u8>, CliError> {
    let mut preamble = vec![format!("qkalman {verb} {}", env!("CARGO_PKG_VERSION"))];
    preamble.extend(cfg.provenance());
    Ok(outcome.table.render(&preamble)?)
}

fn write_out(path: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, bytes)?,
        None => {
            use std::io::Write;
            std::io::stdout().write_all(bytes)?;
        }
    }
    Ok(())
}

/// Entry point behind the binary; returns the process exit code.
pub fn run(cli: Cli) -> u8 {
    let args = cli.command.args().clone();
    let verb = cli.command.verb();
    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: could not configure {n} threads: {e}");
        }
    }
    let result = resolve(&args).and_then(|cfg| {
        let outcome = execute(verb, &cfg)?;
        for w in &outcome.warnings {
            eprintln!("warning: {w}");
        }
        if matches!(cli.command, Command::ValidateConfig(_)) {
            print!("{}", outcome.report);
            return Ok(());
        }
        eprint!("{}", outcome.report);
        let bytes = render(verb, &cfg, &outcome)?;
        write_out(args.out.as_deref(), &bytes)
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
