//! Metrics derived purely from log records, so a replay reproduces them.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::domain::{JobId, Ms};
use crate::scaling::ActionKind;

use super::log::{LogLine, Record};

/// Upper bounds of the stall histogram buckets; the last bucket is open.
pub const STALL_BUCKETS_MS: [Ms; 5] = [10, 20, 50, 100, 200];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalRow {
    pub start_s: u64,
    /// Time-averaged Aggregators held in the interval.
    pub allocated: f64,
    /// Time-averaged sum of running jobs' required servers.
    pub required: f64,
    /// `allocated / required`; absent when nothing ran.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobPerf {
    pub job_id: JobId,
    pub iter_duration_ms: Ms,
    pub iterations: u64,
    pub mean_iter_ms: f64,
    /// Profiled over measured iteration duration.
    pub normalized_perf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub duration_ms: Ms,
    pub jobs_started: u64,
    pub allocated_cpu_s: f64,
    pub required_cpu_s: f64,
    /// `1 - allocated / required` over CPU time.
    pub cpu_time_saving: f64,
    pub peak_allocated: u64,
    pub intervals_with_demand: u64,
    pub frac_intervals_ratio_below_1: f64,
    pub max_ratio: f64,
    pub migrations: u64,
    pub stalls_ms: Vec<Ms>,
    pub stall_histogram: Vec<u64>,
    pub reverts: u64,
    pub rebalances: u64,
    pub late_executed: u64,
    pub late_postponed: u64,
    pub intervals: Vec<IntervalRow>,
    pub jobs: Vec<JobPerf>,
}

#[derive(Debug, Clone, Default)]
struct JobAcc {
    required: u32,
    d: Ms,
    iters: u64,
    span: Ms,
    running: bool,
}

#[derive(Debug, Clone)]
pub struct Collector {
    interval_ms: Ms,
    now: Ms,
    allocated: u64,
    required: u64,
    peak: u64,
    alloc_total: u128,
    req_total: u128,
    cur: (u128, u128),
    rows: Vec<IntervalRow>,
    jobs: BTreeMap<JobId, JobAcc>,
    jobs_started: u64,
    migrations: u64,
    stalls: Vec<Ms>,
    reverts: u64,
    rebalances: u64,
    late: (u64, u64),
}

impl Default for Collector {
    fn default() -> Self {
        Collector {
            interval_ms: 60_000,
            now: 0,
            allocated: 0,
            required: 0,
            peak: 0,
            alloc_total: 0,
            req_total: 0,
            cur: (0, 0),
            rows: Vec::new(),
            jobs: BTreeMap::new(),
            jobs_started: 0,
            migrations: 0,
            stalls: Vec::new(),
            reverts: 0,
            rebalances: 0,
            late: (0, 0),
        }
    }
}

impl Collector {
    fn close_interval(&mut self, len: Ms) {
        let start_s = self.rows.len() as u64 * self.interval_ms / 1000;
        let (a, r) = std::mem::take(&mut self.cur);
        let len = len.max(1) as f64;
        let allocated = a as f64 / len;
        let required = r as f64 / len;
        let ratio = (r > 0).then(|| a as f64 / r as f64);
        self.rows.push(IntervalRow { start_s, allocated, required, ratio });
    }

    fn advance(&mut self, to: Ms) {
        while self.now < to {
            let boundary = (self.rows.len() as u64 + 1) * self.interval_ms;
            let step_end = boundary.min(to);
            let dt = (step_end - self.now) as u128;
            self.cur.0 += self.allocated as u128 * dt;
            self.cur.1 += self.required as u128 * dt;
            self.alloc_total += self.allocated as u128 * dt;
            self.req_total += self.required as u128 * dt;
            self.now = step_end;
            if step_end == boundary {
                self.close_interval(self.interval_ms);
            }
        }
    }

    pub fn observe(&mut self, line: &LogLine) {
        self.advance(line.time_ms);
        match &line.record {
            Record::Start { interval_s } => self.interval_ms = interval_s * 1000,
            Record::JobStart { job, required_servers, iter_duration_ms, .. } => {
                self.jobs_started += 1;
                self.required += *required_servers as u64;
                let acc = self.jobs.entry(job.clone()).or_default();
                *acc = JobAcc { required: *required_servers, d: *iter_duration_ms, running: true, ..JobAcc::default() };
            }
            Record::JobExit { job } => {
                if let Some(acc) = self.jobs.get_mut(job).filter(|a| a.running) {
                    acc.running = false;
                    self.required -= acc.required as u64;
                }
            }
            Record::Scaling { action: ActionKind::AllocAgg, .. } => {
                self.allocated += 1;
                self.peak = self.peak.max(self.allocated);
            }
            Record::Scaling { action: ActionKind::ReleaseAgg, .. } => self.allocated = self.allocated.saturating_sub(1),
            Record::Scaling { action: ActionKind::Revert, .. } => self.reverts += 1,
            Record::Rebalance { moved: true, .. } => self.rebalances += 1,
            Record::Monitor { job, iterations, span_ms, .. } => {
                if let Some(acc) = self.jobs.get_mut(job) {
                    acc.iters += iterations;
                    acc.span += span_ms;
                }
            }
            Record::MigrationDone { .. } => self.migrations += 1,
            Record::JobStall { stall_ms, .. } => self.stalls.push(*stall_ms),
            Record::Late { postponed, .. } => {
                if *postponed {
                    self.late.1 += 1
                } else {
                    self.late.0 += 1
                }
            }
            _ => {}
        }
    }

    pub fn finish(mut self) -> MetricsReport {
        let partial = self.now - self.rows.len() as u64 * self.interval_ms;
        if partial > 0 {
            self.close_interval(partial);
        }
        let with_demand: Vec<f64> = self.rows.iter().filter_map(|r| r.ratio).collect();
        let below = with_demand.iter().filter(|&&r| r < 1.0).count();
        let mut hist = vec![0; STALL_BUCKETS_MS.len() + 1];
        for &s in &self.stalls {
            hist[STALL_BUCKETS_MS.iter().position(|&b| s < b).unwrap_or(STALL_BUCKETS_MS.len())] += 1;
        }
        let jobs = self
            .jobs
            .iter()
            .filter(|(_, a)| a.iters > 0)
            .map(|(j, a)| {
                let mean = a.span as f64 / a.iters as f64;
                JobPerf {
                    job_id: j.clone(),
                    iter_duration_ms: a.d,
                    iterations: a.iters,
                    mean_iter_ms: mean,
                    normalized_perf: a.d as f64 / mean,
                }
            })
            .collect();
        let allocated_cpu_s = self.alloc_total as f64 / 1000.0;
        let required_cpu_s = self.req_total as f64 / 1000.0;
        MetricsReport {
            duration_ms: self.now,
            jobs_started: self.jobs_started,
            allocated_cpu_s,
            required_cpu_s,
            cpu_time_saving: if self.req_total > 0 { 1.0 - allocated_cpu_s / required_cpu_s } else { 0.0 },
            peak_allocated: self.peak,
            intervals_with_demand: with_demand.len() as u64,
            frac_intervals_ratio_below_1: if with_demand.is_empty() { 0.0 } else { below as f64 / with_demand.len() as f64 },
            max_ratio: with_demand.iter().copied().fold(0.0, f64::max),
            migrations: self.migrations,
            stall_histogram: hist,
            stalls_ms: self.stalls,
            reverts: self.reverts,
            rebalances: self.rebalances,
            late_executed: self.late.0,
            late_postponed: self.late.1,
            intervals: self.rows,
            jobs,
        }
    }
}

impl MetricsReport {
    pub fn intervals_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["start_s", "allocated", "required", "ratio"]).expect("in-memory write");
        for r in &self.intervals {
            let ratio = r.ratio.map(|x| format!("{x:.6}")).unwrap_or_default();
            w.write_record([r.start_s.to_string(), format!("{:.6}", r.allocated), format!("{:.6}", r.required), ratio])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    pub fn jobs_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["job_id", "iter_duration_ms", "iterations", "mean_iter_ms", "normalized_perf"])
            .expect("in-memory write");
        for j in &self.jobs {
            w.write_record([
                j.job_id.0.clone(),
                j.iter_duration_ms.to_string(),
                j.iterations.to_string(),
                format!("{:.3}", j.mean_iter_ms),
                format!("{:.6}", j.normalized_perf),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    /// Summary block as `metric,value` rows.
    pub fn summary_csv(&self) -> String {
        let mut rows: Vec<(&str, String)> = vec![
            ("duration_s", format!("{:.3}", self.duration_ms as f64 / 1000.0)),
            ("jobs_started", self.jobs_started.to_string()),
            ("allocated_cpu_s", format!("{:.3}", self.allocated_cpu_s)),
            ("required_cpu_s", format!("{:.3}", self.required_cpu_s)),
            ("cpu_time_saving", format!("{:.6}", self.cpu_time_saving)),
            ("peak_allocated", self.peak_allocated.to_string()),
            ("intervals_with_demand", self.intervals_with_demand.to_string()),
            ("frac_intervals_ratio_below_1", format!("{:.6}", self.frac_intervals_ratio_below_1)),
            ("max_ratio", format!("{:.6}", self.max_ratio)),
            ("migrations", self.migrations.to_string()),
            ("reverts", self.reverts.to_string()),
            ("rebalances", self.rebalances.to_string()),
            ("late_executed", self.late_executed.to_string()),
            ("late_postponed", self.late_postponed.to_string()),
        ];
        let names: Vec<String> = (0..self.stall_histogram.len())
            .map(|i| match STALL_BUCKETS_MS.get(i) {
                Some(b) => format!("stall_lt_{b}ms"),
                None => format!("stall_ge_{}ms", STALL_BUCKETS_MS[STALL_BUCKETS_MS.len() - 1]),
            })
            .collect();
        for (n, c) in names.iter().zip(&self.stall_histogram) {
            rows.push((n, c.to_string()));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["metric", "value"]).expect("in-memory write");
        for (k, v) in rows {
            w.write_record([k, v.as_str()]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{AggId, ClusterId};

    fn line(t: Ms, record: Record) -> LogLine {
        LogLine { time_ms: t, seq: 0, record }
    }

    #[test]
    fn packed_jobs_give_quarter_ratio() {
        let mut c = Collector::default();
        c.observe(&line(0, Record::Start { interval_s: 60 }));
        for a in 0..2 {
            c.observe(&line(0, Record::Scaling { action: ActionKind::AllocAgg, cluster: ClusterId(0), agg: Some(AggId(a)), job: None }));
        }
        for j in 0..4 {
            c.observe(&line(0, Record::JobStart {
                job: JobId::new(format!("j{j}")),
                cluster: ClusterId(0),
                required_servers: 2,
                iter_duration_ms: 1000,
                hosts: vec![],
            }));
        }
        c.observe(&line(120_000, Record::End));
        let r = c.finish();
        assert_eq!(r.intervals.len(), 2);
        assert!(r.intervals.iter().all(|i| i.ratio == Some(0.25)));
        assert!((r.cpu_time_saving - 0.75).abs() < 1e-12);
        assert_eq!(r.frac_intervals_ratio_below_1, 1.0);
    }

    #[test]
    fn empty_log_gives_empty_report() {
        let r = Collector::default().finish();
        assert!(r.intervals.is_empty());
        assert_eq!(r.peak_allocated, 0);
        assert!(r.summary_csv().starts_with("metric,value\n"));
    }
}
