use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedhtl_cli::compare::{cmd_compare, CompareArgs};
use fedhtl_cli::run::{cmd_run, RunArgs};
use fedhtl_cli::{audit, exit, CliError};

/// Federated hetero-task learning simulator.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment file.
    Run {
        config: PathBuf,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-client improvement of METHOD over BASELINE (run directories).
    Compare {
        baseline: PathBuf,
        method: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a communication log; exits nonzero if it holds violations.
    ProtocolAudit { log: PathBuf },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let s = cmd_run(&RunArgs { config, seed, out })?;
            println!("strategy {}  seeds {:?}", s.summary.strategy, s.seeds);
            println!(
                "equal-weight {:.6} ± {:.6}  data-weighted {:.6} ± {:.6}",
                s.summary.equal.mean, s.summary.equal.std, s.summary.data_weighted.mean, s.summary.data_weighted.std
            );
            for c in &s.summary.clients {
                println!(
                    "  client {:>3}  {:<20} {:.6} ± {:.6}",
                    c.client_id,
                    c.metric.as_str(),
                    c.value.mean,
                    c.value.std
                );
            }
            println!("wrote {}", s.out.display());
        }
        Command::Compare { baseline, method, out } => {
            let (dir, overall) = cmd_compare(&CompareArgs { baseline, method, out })?;
            for c in &overall.clients {
                println!("  client {:>3}  {:+.2}%", c.client_id, c.improvement_pct);
            }
            println!("overall {:+.2}%", overall.overall_improvement_pct);
            println!("wrote {}", dir.display());
        }
        Command::ProtocolAudit { log } => {
            let a = audit::cmd_audit(&log)?;
            print!("{}", a.text);
            if a.violations().next().is_some() {
                return Err(CliError {
                    code: exit::VIOLATION,
                    message: "log contains protocol violations".into(),
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
