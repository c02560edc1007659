use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::domain::{AggId, JobId, Ms, TaskId};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum EventKind {
    JobArrive { job: JobId },
    JobExit { job: JobId },
    IterationStart { job: JobId, iter: u64 },
    TensorPush { job: JobId, task: TaskId, iter: u64 },
    AggSlotStart { job: JobId, task: TaskId, iter: u64, agg: AggId },
    AggSlotEnd { job: JobId, task: TaskId, iter: u64, agg: AggId },
    PullResponse { job: JobId, task: TaskId, iter: u64, agg: AggId },
    /// A tensor copy reached its new Aggregator.
    MigrationMsg { job: JobId, task: TaskId },
    StragglerDelay { job: JobId, iter: u64, delay_ms: Ms },
    InterferenceStart { agg: AggId, factor_milli: u64 },
    InterferenceEnd { agg: AggId },
    ScalePeriodTick,
    MonitorTick { job: JobId },
    /// Scenario hook: move every task of a running job to fresh Aggregators.
    ForceMove { job: JobId },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct SimEvent {
    pub time_ms: Ms,
    pub seq: u64,
    pub kind: EventKind,
}

/// Min-queue on `(time_ms, seq)`.
#[derive(Debug, Default)]
pub(crate) struct EventQueue {
    heap: BinaryHeap<Reverse<SimEvent>>,
    next_seq: u64,
}

impl EventQueue {
    pub fn push(&mut self, time_ms: Ms, kind: EventKind) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(SimEvent { time_ms, seq, kind }));
    }

    pub fn pop(&mut self) -> Option<SimEvent> {
        self.heap.pop().map(|Reverse(e)| e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pops_in_time_then_seq_order() {
        let mut q = EventQueue::default();
        q.push(5, EventKind::ScalePeriodTick);
        q.push(3, EventKind::JobExit { job: "b".into() });
        q.push(3, EventKind::JobArrive { job: "a".into() });
        let order: Vec<(Ms, u64)> = std::iter::from_fn(|| q.pop()).map(|e| (e.time_ms, e.seq)).collect();
        assert_eq!(order, vec![(3, 1), (3, 2), (5, 0)]);
    }
}
