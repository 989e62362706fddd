use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use irmkit::error::{Error, Result};
use irmkit::experiment::{self, exit_code, ExperimentConfig, SweepParam, SEED_ENV_VAR};

#[derive(Parser)]
#[command(name = "irmkit", version, about = "Train and evaluate invariant-risk-minimization methods")]
struct Cli {
    /// Worker threads for evaluation (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every trial of an experiment config.
    #[command(after_help = format!("{SEED_ENV_VAR}=<seed> replaces the config's trial list with that one seed."))]
    Run { config: PathBuf },
    /// Aggregate accuracy CSVs (or run directories) by method.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Also write the table as CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Retrain over the values listed in the config's [sweep] table.
    Sweep {
        #[arg(long, value_parser = ["batch_size", "hidden_dim"])]
        param: String,
        config: PathBuf,
    },
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).map_err(|e| match e {
        Error::Io(io) => Error::InvalidConfig(format!("cannot read {}: {io}", path.display())),
        e => e,
    })
}

fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("--threads {n}: {e}")))?;
    }
    match cli.command {
        Command::Run { config } => {
            let cfg = load(&config)?;
            let reports = experiment::run(&cfg)?;
            print!("{}", experiment::compare_reports(&reports)?.table());
            eprintln!("results in {}", cfg.output_dir.display());
        }
        Command::Compare { reports, csv } => {
            let c = experiment::compare(&reports)?;
            for w in &c.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", c.table());
            if let Some(path) = csv {
                c.write_csv(File::create(path)?)?;
            }
        }
        Command::Sweep { param, config } => {
            let cfg = load(&config)?;
            let param: SweepParam = param.parse()?;
            for p in experiment::sweep(&cfg, param)? {
                let r = &p.report;
                println!("{}={:<8} seed {:<4} avg {:.4}  gap {:.4}", param.name(), p.value, r.seed, r.avg_acc, r.acc_gap);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
