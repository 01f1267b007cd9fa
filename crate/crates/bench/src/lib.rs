//! Synthetic retrieval benchmark driving the `gradcache` training modes.

pub mod config;
pub mod error;
pub mod eval;
pub mod model;
pub mod report;
pub mod run;
pub mod task;

pub use config::{Mode, Optimizer, Overrides, RunConfig};
pub use error::{BenchError, Result};
pub use eval::{evaluate_topk, EvalResult};
pub use model::TrainedModel;
pub use run::{run_experiment, sweep, RunResult, StepRecord, SweepRow, Trainer};
pub use task::{generate_task, Pairs, SyntheticTask, TaskConfig};
