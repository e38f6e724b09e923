//! `treecredit` — run, sweep and report tree-credit training experiments.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime failure,
//! 3 verification failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use treecredit_core::experiment::{self, Axis, ExperimentConfig, NOT_REACHED};
use treecredit_core::verify;
use treecredit_core::Error;

#[derive(Parser)]
#[command(
    name = "treecredit",
    version,
    about = "Tree-structured credit assignment experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed, writing metrics and checkpoints.
    Run {
        config: PathBuf,
        /// Resume one seed from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// One full run per axis value per seed, summarized in a CSV.
    Sweep {
        config: PathBuf,
        /// One of scheme, G, J, K.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Summarize every metrics file under a directory.
    Report { dir: PathBuf },
    /// Run the oracle suites.
    Verify,
}

enum Failure {
    Config(String),
    Runtime(String),
    Verify,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn load(path: &Path) -> Result<ExperimentConfig, Failure> {
    // Unreadable files and schema errors are both the user's configuration.
    ExperimentConfig::load(path).map_err(|e| Failure::Config(e.to_string()))
}

fn run(config: &Path, resume: Option<&Path>) -> Result<(), Failure> {
    let cfg = load(config)?;
    let outcomes = match resume {
        Some(ck) => {
            let seed = experiment::Checkpoint::load(ck)?.seed;
            if !cfg.train.seeds.contains(&seed) {
                return Err(Failure::Config(format!(
                    "checkpoint seed {seed} is not among the configured seeds"
                )));
            }
            vec![experiment::run_seed(&cfg, seed, Some(ck))?]
        }
        None => experiment::run(&cfg)?,
    };
    for o in outcomes {
        let fin = o.final_eval().map_or("-".into(), |r| format!("{r:.4}"));
        println!("seed {}: {} steps, final eval {fin}", o.seed, o.steps);
    }
    Ok(())
}

fn sweep(config: &Path, axis: &str, values: &[String]) -> Result<(), Failure> {
    let cfg = load(config)?;
    let axis: Axis = axis.parse()?;
    let result = experiment::sweep(&cfg, axis, values)?;
    for c in &result.cells {
        println!(
            "{}={}: {:.4} ± {:.4} over {} seeds",
            c.axis, c.value, c.mean_final_eval, c.std_final_eval, c.seeds
        );
    }
    println!("wrote {}", result.csv.display());
    Ok(())
}

fn report(dir: &Path) -> Result<(), Failure> {
    for s in experiment::report(dir)? {
        let fin = s.final_eval.map_or("-".into(), |r| format!("{r:.4}"));
        let reached = s
            .steps_to_threshold
            .map_or(NOT_REACHED.into(), |n| n.to_string());
        println!(
            "{} seed {} [{}]: final {fin}, steps to threshold {reached}",
            s.run, s.seed, s.scheme
        );
    }
    println!(
        "wrote summary.csv, curves.csv and report.md in {}",
        dir.display()
    );
    Ok(())
}

fn verify_all() -> Result<(), Failure> {
    let reports = verify::run_all();
    for r in &reports {
        println!("{r}");
    }
    if reports.iter().all(|r| r.passed) {
        Ok(())
    } else {
        Err(Failure::Verify)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, resume } => run(config, resume.as_deref()),
        Command::Sweep {
            config,
            axis,
            values,
        } => sweep(config, axis, values),
        Command::Report { dir } => report(dir),
        Command::Verify => verify_all(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Verify) => {
            eprintln!("verification failed");
            ExitCode::from(3)
        }
    }
}
