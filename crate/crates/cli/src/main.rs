//! `crowdledger`: batch front end for simulations, training, evaluation,
//! sweeps, the Birdwatch case study and figure rendering.

mod commands;
mod error;
mod output;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use crate::commands::Overrides;
use crate::error::Failure;
use crate::output::resolve_out;

#[derive(Parser)]
#[command(name = "crowdledger", version, about = "Ledger-backed crowdsourced truth assessment experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `$CROWDLEDGER_OUT/<command>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the classifier blend weight.
    #[arg(long)]
    alpha: Option<f64>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides { seed: self.seed, alpha: self.alpha }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a crowd-only simulation and write its event log, chain and reputation trace
    Simulate(Common),
    /// Run a bootstrap simulation and train both classifiers on its training stories
    Train(Common),
    /// Re-run the scenario with trained checkpoints from --out and report held-out metrics
    Evaluate(Common),
    /// Run a grid or random-mix sweep and fit the attack-impact regression
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Number of random mixes (default 100 when the sweep config lists no cells)
        #[arg(long)]
        runs: Option<usize>,
        /// Worker threads (default: all cores)
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Import Birdwatch notes and ratings and run the labeled case study
    Birdwatch(Common),
    /// Render SVG figures and summary.json from run directories
    Report {
        /// Run directories; defaults to --out
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<Vec<PathBuf>, Failure> {
    let manifest = match cli.command {
        Command::Simulate(c) => {
            commands::simulate(&c.config, &c.overrides(), resolve_out(c.out.as_deref(), "simulate"))?
        }
        Command::Train(c) => commands::train(&c.config, &c.overrides(), resolve_out(c.out.as_deref(), "train"))?,
        Command::Evaluate(c) => {
            commands::evaluate_cmd(&c.config, &c.overrides(), resolve_out(c.out.as_deref(), "train"))?
        }
        Command::Sweep { common: c, runs, jobs } => {
            commands::sweep(&c.config, runs, jobs, &c.overrides(), resolve_out(c.out.as_deref(), "sweep"))?
        }
        Command::Birdwatch(c) => {
            commands::birdwatch(&c.config, &c.overrides(), resolve_out(c.out.as_deref(), "birdwatch"))?
        }
        Command::Report { dirs, out } => {
            let dirs = if dirs.is_empty() { vec![resolve_out(out.as_deref(), "simulate")] } else { dirs };
            return dirs.iter().map(|d| report::report_dir(d)).collect();
        }
    };
    Ok(vec![manifest])
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(manifests) => {
            for m in manifests {
                println!("{}", m.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
