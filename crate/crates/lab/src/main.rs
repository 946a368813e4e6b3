use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use hyperagent_lab::config::{ExperimentConfig, ExperimentKind};
use hyperagent_lab::output::{config_hash, write_outputs, Manifest};
use hyperagent_lab::{run_experiment, LabError, LabResult};

#[derive(Parser)]
#[command(name = "hyperagent-lab", version, about = "Run HyperAgent experiments from a JSON config")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One agent on one environment, with per-episode output.
    Run(CommonArgs),
    /// DeepSea scaling sweep.
    Sweep(CommonArgs),
    /// Monte Carlo check of the posterior-approximation event.
    VerifyApprox(CommonArgs),
    /// Bayesian regret on MDPs drawn from a Dirichlet prior.
    Regret(CommonArgs),
    /// Variance propagation through the randomized Bellman operator.
    Demo(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    #[arg(long)]
    config: PathBuf,
    /// Master seed; every task stream is derived from it and the task's seed.
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    workers: Option<usize>,
}

impl Command {
    fn parts(&self) -> (&'static str, ExperimentKind, &CommonArgs) {
        match self {
            Command::Run(a) => ("run", ExperimentKind::SingleRun, a),
            Command::Sweep(a) => ("sweep", ExperimentKind::DeepseaScaling, a),
            Command::VerifyApprox(a) => ("verify-approx", ExperimentKind::VerifyApprox, a),
            Command::Regret(a) => ("regret", ExperimentKind::BayesRegret, a),
            Command::Demo(a) => ("demo", ExperimentKind::PropagationDemo, a),
        }
    }
}

fn execute(command: &Command) -> LabResult<()> {
    let (name, kind, args) = command.parts();
    let text = std::fs::read_to_string(&args.config).map_err(|e| LabError::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let config = ExperimentConfig::from_json(&text)?;
    if config.experiment != kind {
        return Err(LabError::Config(format!("`{name}` expects a {} config, got {}", kind.name(), config.experiment.name())));
    }
    let workers = args.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        return Err(LabError::Config("--workers must be at least 1".into()));
    }
    let start = Instant::now();
    let out = run_experiment(&config, args.seed, workers)?;
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        command: name.into(),
        experiment: kind.name().into(),
        master_seed: args.seed,
        config_sha256: config_hash(&config),
        config,
        csv_file: String::new(),
        csv_sha256: String::new(),
        rows: 0,
        total_seconds: start.elapsed().as_secs_f64(),
        tasks: out.timings,
    };
    let written = write_outputs(&args.out, kind.name(), &out.rows, manifest)?;
    println!("wrote {} ({} rows, sha256 {})", written.csv.display(), out.rows.len(), written.csv_sha256);
    println!("wrote {}", written.manifest.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
