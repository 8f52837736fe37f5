use std::path::PathBuf;
use std::process::ExitCode;

use amcmc::data_io::RunConfig;
use amcmc::tasks::{self, Task};
use amcmc::AmcError;
use clap::{Parser, Subcommand};

/// Train and evaluate amortised MCMC samplers.
#[derive(Parser, Debug)]
#[command(name = "amcmc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a sampler to the 1-D two-component mixture.
    GmmFit(Common),
    /// Sweep the chain length at a fixed T*eta on the mixture.
    GmmSweep(Common),
    /// Bayesian neural network classification with baselines.
    BnnTrain(Common),
    /// Learn a linear-Gaussian decoder with an MCMC-refined encoder.
    MleToy(Common),
    /// KSD of a samples file against the mixture.
    KsdEval(Common),
    /// Check that KL to the stationary law never rises on random finite chains.
    Lemma1Check(Common),
}

#[derive(clap::Args, Debug)]
struct Common {
    /// JSON run configuration; unset keys take the task defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
}

impl Command {
    fn split(self) -> (Task, Common) {
        match self {
            Command::GmmFit(c) => (Task::GmmFit, c),
            Command::GmmSweep(c) => (Task::GmmSweep, c),
            Command::BnnTrain(c) => (Task::BnnTrain, c),
            Command::MleToy(c) => (Task::MleToy, c),
            Command::KsdEval(c) => (Task::KsdEval, c),
            Command::Lemma1Check(c) => (Task::Lemma1Check, c),
        }
    }
}

fn exit_code(err: &AmcError) -> u8 {
    if err.is_numerical() {
        3
    } else if err.is_io() || matches!(err.root(), AmcError::Json(_)) {
        4
    } else {
        2
    }
}

fn run(task: Task, args: Common) -> amcmc::Result<()> {
    amcmc::init_threads_from_env()?;
    let mut cfg = match args.config {
        Some(path) => RunConfig::load(&path)?,
        None => RunConfig::new(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = Some(seed);
    }
    if let Some(out) = args.out {
        cfg.out_dir = Some(out.to_string_lossy().into_owned());
    }
    if let Some(n) = args.iterations {
        cfg.iterations = Some(n);
    }
    let report = tasks::run(task, &cfg)?;
    println!("{report}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (task, args) = cli.command.split();
    match run(task, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
