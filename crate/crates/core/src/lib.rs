//! Scheduling library and discrete-event simulator for a shared,
//! autoscaled model-aggregation service.

pub mod assignment;
pub mod domain;
pub mod error;
pub mod migration;
pub mod oracle;
pub mod profiles;
pub mod scaling;
pub mod sim;

pub use assignment::{
    assign_job, assign_task, estimate_impact, feedback_check, AssignConfig, AssignScope, Feedback,
    ImpactEstimate,
};
pub use domain::{
    build_schedule, build_slot_schedule, compute_cycle, refresh_in_pool, default_ready_offsets, effective_iteration,
    free_slots, perf_loss, repetitions, AggId, AggStatus, AggTask, AggregatorState, Assignment,
    ClusterId, JobId, JobProfile, JobRuntime, Ms, Placement, Profiles, Rational, Schedule, Slot,
    TaskId, TaskKey,
};
pub use error::{InputError, ScheduleError};
