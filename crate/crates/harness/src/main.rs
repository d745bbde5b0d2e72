use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use clustr_harness::{run_task, HarnessError, Precision, RunConfig, Task};

#[derive(Parser)]
#[command(name = "clustr", version, about = "Clustering-guided attention: training, benchmarks and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (JSON). Defaults apply to every omitted field.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config precision.
    #[arg(long, value_enum)]
    precision: Option<Precision>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics and a checkpoint.
    Train(Common),
    /// Cluster a token set (CTR1 or CSV) and write the result as JSON.
    Cluster(Common),
    /// Measured vs. analytic attention multiplies per layer.
    Bench(Common),
    /// Paired training runs that differ in one component.
    Ablate(Common),
    /// Finite-difference gradient checks.
    Gradcheck(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (task, args) = match cli.command {
        Command::Train(a) => (Task::Train, a),
        Command::Cluster(a) => (Task::Cluster, a),
        Command::Bench(a) => (Task::Bench, a),
        Command::Ablate(a) => (Task::Ablate, a),
        Command::Gradcheck(a) => (Task::Gradcheck, a),
    };
    match execute(task, &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("clustr {}: {e}", task.name());
            ExitCode::from(e.exit_code())
        }
    }
}

fn execute(task: Task, args: &Common) -> Result<(), HarnessError> {
    let mut run = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        run.seed = seed;
    }
    if let Some(p) = args.precision {
        run.precision = p;
    }
    run_task(task, &run, &args.out)
}
