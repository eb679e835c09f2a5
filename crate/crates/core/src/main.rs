use clap::{Args, Parser, Subcommand};
use maladiff::config::RunConfig;
use maladiff::runner::{self, Command as RunCommand};
use std::path::PathBuf;
use std::process::ExitCode;

/// Brownian dynamics on periodic domains with Metropolis-adjusted time
/// stepping, self-diffusion estimators, and quadrature reference values.
#[derive(Parser)]
#[command(name = "maladiff", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Mean-square-displacement run at one step size (msd.csv, summary.csv)
    SimEinstein(Common),
    /// Force-autocorrelation run at one step size (corr.csv, summary.csv)
    SimGk(Common),
    /// Both diffusion estimators across dt_list, with the affine
    /// zero-step-size extrapolation (sweep.csv, fit.csv)
    SweepDt(Common),
    /// Metropolis rejection rate across dt_list, with the fitted log-log
    /// slope (reject.csv, reject_fit.csv)
    RejectionScan(Common),
    /// Independent reference values for the configured system (oracle.csv)
    Oracle(Common),
}

#[derive(Args)]
struct Common {
    /// Path to the JSON run configuration
    #[arg(long)]
    config: PathBuf,
    /// Override the configured seed
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 keeps the default pool)
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Override the configured output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems exit 1; --help and --version exit 0.
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (command, common) = match &cli.command {
        Cmd::SimEinstein(c) => (RunCommand::SimEinstein, c),
        Cmd::SimGk(c) => (RunCommand::SimGk, c),
        Cmd::SweepDt(c) => (RunCommand::SweepDt, c),
        Cmd::RejectionScan(c) => (RunCommand::RejectionScan, c),
        Cmd::Oracle(c) => (RunCommand::Oracle, c),
    };

    let mut cfg = match RunConfig::load(&common.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if common.workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(common.workers)
            .build_global();
        if let Err(e) = pool {
            eprintln!("could not size the worker pool: {e}");
            return ExitCode::from(1);
        }
    }

    match runner::execute(command, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
