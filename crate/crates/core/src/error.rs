use thiserror::Error;

use crate::domain::{AggId, JobId, TaskId};

/// Errors raised by the cyclic-execution arithmetic and the schedulers built on it.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScheduleError {
    #[error("execution cycle {cycle_ms} ms is shorter than iteration duration {iter_ms} ms")]
    CycleTooShort { cycle_ms: u64, iter_ms: u64 },
    #[error("current iteration duration is below the profiled duration")]
    DurationBelowProfile,
    #[error("iteration duration must be positive")]
    ZeroDuration,
    #[error("aggregator {agg} overloaded by {deficit_ms} ms per cycle")]
    Overloaded { agg: AggId, deficit_ms: u64 },
    #[error("job {0} has no iteration estimate")]
    MissingEstimate(JobId),
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("unknown aggregator {0}")]
    UnknownAggregator(AggId),
    #[error("slot schedule for aggregator {agg} cannot place task {task} of job {job}")]
    Infeasible { agg: AggId, job: JobId, task: TaskId },
    #[error("no aggregator can host task {task} of job {job} without new allocations")]
    NoCapacity { job: JobId, task: TaskId },
    #[error("only {observed} of {required} monitored iterations observed")]
    InsufficientObservations { observed: u64, required: u64 },
    #[error("instance with {aggs} aggregators and {tasks} tasks exceeds the enumeration guard")]
    TooLarge { aggs: u32, tasks: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Errors raised while reading profiles, traces or configuration files.
#[derive(Debug, Error)]
pub enum InputError {
    #[error("{path}:{line}: {msg}")]
    Malformed { path: String, line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = ScheduleError> = std::result::Result<T, E>;
