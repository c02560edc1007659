//! Deterministic discrete-event simulation of jobs, Agents, Aggregators and
//! the service manager.

mod engine;
mod event;
pub mod late;
pub mod log;
pub mod metrics;
pub mod scenarios;
pub mod trace;

use serde::{Deserialize, Serialize};

use crate::assignment::AssignConfig;
use crate::domain::Ms;
use crate::error::{Result, ScheduleError};
use crate::scaling::ScalingConfig;

pub use engine::{Engine, InterferenceSpec, SimJob, SimOutput, SimStats};
pub use event::{EventKind, SimEvent};
pub use late::{handle_late_request, LateDecision};
pub use log::{parse_log, replay, to_jsonl, LogLine, Record};
pub use metrics::{Collector, IntervalRow, JobPerf, MetricsReport};
pub use trace::{generate_trace, parse_trace, read_trace, trace_to_csv, TraceGen, TraceRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub loss_limit: f64,
    pub monitor_iterations: u64,
    pub scaling_period_s: u64,
    pub bandwidth_gbps: f64,
    pub per_message_overhead_ms: Ms,
    pub interval_s: u64,
    pub seed: u64,
    pub clusters_initial: u32,
    pub ondemand_threshold: u32,
    pub max_aggs_per_cluster: u32,
    pub headroom: f64,
    /// Chance that a job iteration has a straggling worker.
    pub straggler_prob: f64,
    /// Upper bound of a sampled straggler delay, as a fraction of the profiled iteration.
    pub straggler_max_frac: f64,
    /// Whether moving tasks off a slow Aggregator may allocate new ones.
    pub allow_new_aggs: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            loss_limit: 0.1,
            monitor_iterations: 100,
            scaling_period_s: 300,
            bandwidth_gbps: 100.0,
            per_message_overhead_ms: 2,
            interval_s: 60,
            seed: 0,
            clusters_initial: 1,
            ondemand_threshold: 1,
            max_aggs_per_cluster: 64,
            headroom: 1.1,
            straggler_prob: 0.0,
            straggler_max_frac: 0.25,
            allow_new_aggs: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.assign().validate()?;
        self.scaling().validate()?;
        let bad = |m: &str| Err(ScheduleError::InvalidConfig(m.into()));
        if !(self.bandwidth_gbps > 0.0) {
            return bad("bandwidth_gbps must be positive");
        }
        if self.interval_s == 0 {
            return bad("interval_s must be positive");
        }
        if !(0.0..=1.0).contains(&self.straggler_prob) || !(0.0..=1.0).contains(&self.straggler_max_frac) {
            return bad("straggler_prob and straggler_max_frac must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn assign(&self) -> AssignConfig {
        AssignConfig {
            loss_limit: self.loss_limit,
            monitor_iterations: self.monitor_iterations,
            low_perf_threshold: 1.0 - self.loss_limit,
        }
    }

    pub fn scaling(&self) -> ScalingConfig {
        ScalingConfig {
            scaling_period_s: self.scaling_period_s,
            ondemand_threshold: self.ondemand_threshold,
            max_aggs_per_cluster: self.max_aggs_per_cluster,
            headroom: self.headroom,
            clusters_initial: self.clusters_initial,
        }
    }
}
