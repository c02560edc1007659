//! Line-delimited event log and replay.

use serde::{Deserialize, Serialize};

use crate::assignment::Feedback;
use crate::domain::{AggId, ClusterId, JobId, Ms, TaskKey};
use crate::error::InputError;
use crate::migration::MsgKind;
use crate::scaling::ActionKind;

use super::metrics::{Collector, MetricsReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Start { interval_s: u64 },
    JobArrive { job: JobId, required_servers: u32 },
    JobBlocked { job: JobId },
    JobStart { job: JobId, cluster: ClusterId, required_servers: u32, iter_duration_ms: Ms, hosts: Vec<AggId> },
    JobExit { job: JobId },
    Scaling {
        action: ActionKind,
        cluster: ClusterId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        agg: Option<AggId>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        job: Option<JobId>,
    },
    Monitor { job: JobId, iterations: u64, span_ms: Ms, loss: f64, decision: Feedback },
    Revert { job: JobId, hosts: Vec<AggId> },
    Rebalance { job: JobId, from: AggId, moved: bool },
    Migration { session: u64, tensor: TaskKey, msg: MsgKind, from: AggId, to: AggId },
    MigrationDone { session: u64, tensor: TaskKey, from: AggId, to: AggId, wait_ms: Ms },
    MigrationCancel { session: u64, tensor: TaskKey },
    /// Worker-visible suspension of a job caused by one batch of migrations.
    JobStall { job: JobId, redirect_ms: Ms, copy_wait_ms: Ms, stall_ms: Ms },
    Straggler { job: JobId, iteration: u64, delay_ms: Ms },
    Late { job: JobId, tensor: TaskKey, agg: AggId, postponed: bool },
    Interference { agg: AggId, factor: f64, active: bool },
    Tick,
    End,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub time_ms: Ms,
    pub seq: u64,
    #[serde(flatten)]
    pub record: Record,
}

pub fn to_jsonl(lines: &[LogLine]) -> String {
    let mut out = String::new();
    for l in lines {
        out.push_str(&serde_json::to_string(l).expect("log line serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_log(text: &str, origin: &str) -> Result<Vec<LogLine>, InputError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| InputError::Malformed {
                path: origin.to_string(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Recomputes the metrics report from a recorded log.
pub fn replay(lines: &[LogLine]) -> MetricsReport {
    let mut c = Collector::default();
    for l in lines {
        c.observe(l);
    }
    c.finish()
}
