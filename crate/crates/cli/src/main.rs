use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use equity_alloc::cli::{run, Command, RunConfig};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    Generate,
    Verify,
    SolveBasic,
    SolveQuadratic,
    SolveRelaxed,
    Spectrum,
    Report,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Generate => Command::Generate,
            Cmd::Verify => Command::Verify,
            Cmd::SolveBasic => Command::SolveBasic,
            Cmd::SolveQuadratic => Command::SolveQuadratic,
            Cmd::SolveRelaxed => Command::SolveRelaxed,
            Cmd::Spectrum => Command::Spectrum,
            Cmd::Report => Command::Report,
        }
    }
}

/// Equity allocation and portfolio selection on a scenario tree.
///
/// Exit codes: 0 success, 1 infeasible or failed check, 2 configuration
/// error, 3 numerical failure.
#[derive(Debug, Parser)]
#[command(version, about)]
struct Args {
    command: Cmd,
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `solver.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `solver.max_dim`.
    #[arg(long)]
    max_dim: Option<usize>,
    /// Do not print the summary.
    #[arg(long, short)]
    quiet: bool,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let mut config = match RunConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code());
        }
    };
    if let Some(s) = args.seed {
        config.solver.seed = s;
    }
    if let Some(o) = args.out {
        config.output.dir = o;
    }
    if let Some(m) = args.max_dim {
        config.solver.max_dim = m;
    }
    match run(args.command.into(), &config) {
        Ok(outcome) => {
            if !args.quiet {
                print!("{}", outcome.text);
            }
            ExitCode::from(outcome.code)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
