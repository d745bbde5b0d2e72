//! Desk-scale harness around `clustr-core`: synthetic data, training,
//! complexity benchmarks, ablations and debugging subcommands.

pub mod ablate;
pub mod bench;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod inspect;
pub mod optim;
pub mod report;
pub mod train;

pub use config::{Precision, RunConfig, Task};
pub use error::{HarnessError, Result};

use std::path::Path;

/// Runs `task` and writes its artifacts, plus the effective config, to `out`.
pub fn run_task(task: Task, run: &RunConfig, out: &Path) -> Result<()> {
    if let Some(t) = run.task {
        if t != task {
            return Err(HarnessError::Config(format!(
                "config is for `{}` but `{}` was requested",
                t.name(),
                task.name()
            )));
        }
    }
    run.validate()?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.json"), report::to_json(run)?)?;
    match task {
        Task::Train => train::train_run(run, Some(out)).map(|_| ()),
        Task::Cluster => inspect::cluster_run(run, out).map(|_| ()),
        Task::Bench => {
            let report = bench::bench_run(run, out)?;
            if report.all_match() {
                Ok(())
            } else {
                Err(HarnessError::Numeric("measured and analytic attention counts differ".into()))
            }
        }
        Task::Ablate => ablate::ablate(run, out).map(|_| ()),
        Task::Gradcheck => gradcheck::gradcheck_run(run, out).map(|_| ()),
    }
}
