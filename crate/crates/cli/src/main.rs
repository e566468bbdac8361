use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use condflow_cli::harness::{run, Subcommand};
use condflow_cli::scenario::parse_scenario;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Simulate,
    VerifyCopies,
    VerifyCondprocess,
    VerifyIto,
    VerifyControl,
    Convergence,
}

impl From<Command> for Subcommand {
    fn from(c: Command) -> Self {
        match c {
            Command::Simulate => Subcommand::Simulate,
            Command::VerifyCopies => Subcommand::VerifyCopies,
            Command::VerifyCondprocess => Subcommand::VerifyCondprocess,
            Command::VerifyIto => Subcommand::VerifyIto,
            Command::VerifyControl => Subcommand::VerifyControl,
            Command::Convergence => Subcommand::Convergence,
        }
    }
}

/// Conditional measure-flow experiments driven by scenario files.
#[derive(Debug, Parser)]
#[command(name = "condflow", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the scenario's master seed.
    #[arg(long, env = "CONDFLOW_SEED")]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, env = "CONDFLOW_THREADS")]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let mut scenario = match parse_scenario(&cli.scenario) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = cli.seed {
        scenario.seeds.master = seed;
    }
    match run(cli.command.into(), &scenario, &cli.out) {
        Ok(m) => {
            for c in &m.checks {
                let verdict = if c.pass { "pass" } else { "FAIL" };
                println!(
                    "{verdict} {} value={} threshold={}",
                    c.name, c.value, c.threshold
                );
            }
            if m.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
