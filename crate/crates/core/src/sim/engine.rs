use std::collections::{BTreeMap, BTreeSet, VecDeque};

use num_traits::ToPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assignment::{feedback_check, measured_loss, task_host, AssignConfig, Feedback};
use crate::domain::{AggId, AggStatus, ClusterId, JobId, JobProfile, JobRuntime, Ms, Profiles, Rational, Slot, TaskId, TaskKey};
use crate::error::{Result, ScheduleError};
use crate::migration::{copy_time_ms, initiate_migration, MigrationRegistry, MigrationSession, MsgKind};
use crate::scaling::Service;

use super::event::{EventKind, EventQueue};
use super::late::{first_gap, handle_late_request, LateDecision};
use super::log::{LogLine, Record};
use super::metrics::{Collector, MetricsReport};
use super::RunConfig;

/// One job to simulate.
#[derive(Debug, Clone)]
pub struct SimJob {
    pub profile: JobProfile,
    pub submit_ms: Ms,
    pub duration_ms: Ms,
    /// Bypass the scheduler and pin task `i` to `hosts[i]`.
    pub fixed_hosts: Option<Vec<AggId>>,
}

impl SimJob {
    pub fn new(profile: JobProfile, submit_ms: Ms, duration_ms: Ms) -> Self {
        SimJob { profile, submit_ms, duration_ms, fixed_hosts: None }
    }
}

/// Slows an Aggregator's network transfers by `slowdown_factor` during `[start_ms, end_ms)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterferenceSpec {
    pub agg: AggId,
    pub start_ms: Ms,
    pub end_ms: Ms,
    pub slowdown_factor: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SimStats {
    pub events: u64,
    pub aggregations: u64,
    /// Tensor updates aggregated twice in one iteration or never.
    pub conservation_violations: u64,
    pub protocol_errors: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub log: Vec<LogLine>,
    pub report: MetricsReport,
    /// Iteration completion times per job (when recording is enabled).
    pub completions: BTreeMap<JobId, Vec<Ms>>,
    pub stats: SimStats,
}

#[derive(Debug, Clone, Default)]
struct Timetable {
    cycle: Ms,
    slots: Vec<(Ms, Ms)>,
    by_task: BTreeMap<TaskKey, Vec<Ms>>,
    source: Vec<Slot>,
}

impl Timetable {
    fn build(cycle: Ms, source: &[Slot]) -> Self {
        let mut slots: Vec<(Ms, Ms)> = source.iter().map(|s| (s.start_ms, s.duration_ms)).collect();
        slots.sort_unstable();
        let mut by_task: BTreeMap<TaskKey, Vec<Ms>> = BTreeMap::new();
        for s in source {
            by_task.entry(TaskKey::new(s.job_id.clone(), s.task_id)).or_default().push(s.start_ms);
        }
        for v in by_task.values_mut() {
            v.sort_unstable();
        }
        Timetable { cycle, slots, by_task, source: source.to_vec() }
    }

    /// Next start of one of `key`'s slots at or after `t`, later than `after`.
    fn next_instance(&self, key: &TaskKey, t: Ms, after: Option<Ms>) -> Option<Ms> {
        let offs = self.by_task.get(key)?;
        let t = after.map_or(t, |a| t.max(a + 1));
        let mut base = t / self.cycle * self.cycle;
        loop {
            if let Some(o) = offs.iter().find(|&&o| base + o >= t) {
                return Some(base + o);
            }
            base += self.cycle;
        }
    }
}

#[derive(Debug, Clone, Default)]
struct AggRt {
    table: Timetable,
    extras: Vec<(Ms, Ms)>,
    egress_free: Ms,
}

#[derive(Debug, Clone)]
struct TaskRt {
    host: AggId,
    last_slot: Option<Ms>,
    expected: Ms,
    aggregated: Option<u64>,
    deferred: Option<Ms>,
}

#[derive(Debug, Clone)]
struct JobRt {
    profile: JobProfile,
    duration_ms: Ms,
    fixed_hosts: Option<Vec<AggId>>,
    started: bool,
    exited: bool,
    iter: u64,
    outstanding: usize,
    tasks: BTreeMap<TaskId, TaskRt>,
    win_start: Option<Ms>,
    win_iters: u64,
    iter_start: Ms,
    /// Per-host latest pull offset within the current iteration.
    iter_lag: BTreeMap<AggId, Ms>,
    /// Per-host sum of `iter_lag` over the monitoring window.
    lag: BTreeMap<AggId, Ms>,
    probation: bool,
    reverts: u32,
    rebalances: u32,
    blacklist: BTreeSet<AggId>,
    stragglers: BTreeMap<u64, Ms>,
    redirect_ms: Ms,
    stall: Option<(Ms, Ms)>,
    completions: Vec<Ms>,
}

impl JobRt {
    fn reset_window(&mut self) {
        self.win_start = None;
        self.win_iters = 0;
        self.lag.clear();
    }
}

#[derive(Debug, Clone)]
struct SimSession {
    s: MigrationSession,
}

pub struct Engine {
    cfg: RunConfig,
    acfg: AssignConfig,
    profiles: Profiles,
    svc: Service,
    queue: EventQueue,
    now: Ms,
    jobs: BTreeMap<JobId, JobRt>,
    aggs: BTreeMap<AggId, AggRt>,
    interference: BTreeMap<AggId, f64>,
    sessions: BTreeMap<TaskKey, SimSession>,
    registry: MigrationRegistry,
    rng: ChaCha8Rng,
    lines: Vec<LogLine>,
    collector: Collector,
    svc_logged: usize,
    pending: VecDeque<JobId>,
    blocked: u32,
    peak: BTreeMap<ClusterId, usize>,
    future_arrivals: usize,
    stats: SimStats,
    record_completions: bool,
}

impl Engine {
    pub fn new(cfg: RunConfig, jobs: Vec<SimJob>) -> Result<Self> {
        cfg.validate()?;
        let mut queue = EventQueue::default();
        let mut profiles = Profiles::new();
        let mut rts = BTreeMap::new();
        for j in &jobs {
            j.profile.validate().map_err(ScheduleError::InvalidConfig)?;
            if profiles.insert(j.profile.job_id.clone(), j.profile.clone()).is_some() {
                return Err(ScheduleError::InvalidConfig(format!("duplicate job {}", j.profile.job_id)));
            }
            queue.push(j.submit_ms, EventKind::JobArrive { job: j.profile.job_id.clone() });
            rts.insert(
                j.profile.job_id.clone(),
                JobRt {
                    profile: j.profile.clone(),
                    duration_ms: j.duration_ms,
                    fixed_hosts: j.fixed_hosts.clone(),
                    started: false,
                    exited: false,
                    iter: 0,
                    outstanding: 0,
                    tasks: BTreeMap::new(),
                    win_start: None,
                    win_iters: 0,
                    iter_start: 0,
                    iter_lag: BTreeMap::new(),
                    lag: BTreeMap::new(),
                    probation: true,
                    reverts: 0,
                    rebalances: 0,
                    blacklist: BTreeSet::new(),
                    stragglers: BTreeMap::new(),
                    redirect_ms: 0,
                    stall: None,
                    completions: Vec::new(),
                },
            );
        }
        if !jobs.is_empty() {
            queue.push(cfg.scaling_period_s * 1000, EventKind::ScalePeriodTick);
        }
        Ok(Engine {
            acfg: cfg.assign(),
            svc: Service::new(cfg.scaling()),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            profiles,
            queue,
            now: 0,
            future_arrivals: jobs.len(),
            jobs: rts,
            aggs: BTreeMap::new(),
            interference: BTreeMap::new(),
            sessions: BTreeMap::new(),
            registry: MigrationRegistry::default(),
            lines: Vec::new(),
            collector: Collector::default(),
            svc_logged: 0,
            pending: VecDeque::new(),
            blocked: 0,
            peak: BTreeMap::new(),
            stats: SimStats::default(),
            record_completions: false,
        })
    }

    /// Keep every job's iteration completion times in the output.
    pub fn record_completions(&mut self, on: bool) {
        self.record_completions = on;
    }

    /// Delays every push of `job`'s iteration `at_iteration` by `delay_ms`,
    /// as if one worker straggled.
    pub fn inject_straggler(&mut self, job: &JobId, _worker: u32, delay_ms: Ms, at_iteration: u64) {
        if delay_ms > 0 {
            self.queue.push(0, EventKind::StragglerDelay { job: job.clone(), iter: at_iteration, delay_ms });
        }
    }

    pub fn add_interference(&mut self, spec: InterferenceSpec) {
        let factor_milli = (spec.slowdown_factor.max(1.0) * 1000.0).round() as u64;
        self.queue.push(spec.start_ms, EventKind::InterferenceStart { agg: spec.agg, factor_milli });
        self.queue.push(spec.end_ms, EventKind::InterferenceEnd { agg: spec.agg });
    }

    /// At `at_ms`, reassigns every task of `job` away from its current Aggregators.
    pub fn force_move(&mut self, job: &JobId, at_ms: Ms) {
        self.queue.push(at_ms, EventKind::ForceMove { job: job.clone() });
    }

    pub fn run(mut self) -> Result<SimOutput> {
        self.log(Record::Start { interval_s: self.cfg.interval_s });
        while let Some(ev) = self.queue.pop() {
            debug_assert!(ev.time_ms >= self.now, "event scheduled in the past");
            self.now = ev.time_ms;
            self.stats.events += 1;
            self.dispatch(ev.kind)?;
        }
        self.log(Record::End);
        let report = self.collector.clone().finish();
        let completions = self.jobs.iter().map(|(j, r)| (j.clone(), r.completions.clone())).collect();
        Ok(SimOutput { log: self.lines, report, completions, stats: self.stats })
    }

    fn dispatch(&mut self, kind: EventKind) -> Result<()> {
        match kind {
            EventKind::JobArrive { job } => self.on_arrive(job),
            EventKind::JobExit { job } => self.on_exit(job),
            EventKind::IterationStart { job, iter } => {
                self.on_iteration_start(job, iter);
                Ok(())
            }
            EventKind::TensorPush { job, task, iter } => {
                self.on_push(job, task, iter);
                Ok(())
            }
            EventKind::AggSlotStart { job, task, iter, agg } => {
                let exec = self.exec_of(&job, task);
                self.queue.push(self.now + exec, EventKind::AggSlotEnd { job, task, iter, agg });
                Ok(())
            }
            EventKind::AggSlotEnd { job, task, iter, agg } => {
                self.on_slot_end(job, task, iter, agg);
                Ok(())
            }
            EventKind::PullResponse { job, task, iter, agg } => {
                self.on_pull(job, task, iter, agg);
                Ok(())
            }
            EventKind::MigrationMsg { job, task } => self.on_copy_arrived(job, task),
            EventKind::StragglerDelay { job, iter, delay_ms } => {
                if let Some(j) = self.jobs.get_mut(&job) {
                    *j.stragglers.entry(iter).or_default() += delay_ms;
                }
                Ok(())
            }
            EventKind::InterferenceStart { agg, factor_milli } => {
                let factor = factor_milli as f64 / 1000.0;
                self.interference.insert(agg, factor);
                self.log(Record::Interference { agg, factor, active: true });
                Ok(())
            }
            EventKind::InterferenceEnd { agg } => {
                self.interference.remove(&agg);
                self.log(Record::Interference { agg, factor: 1.0, active: false });
                Ok(())
            }
            EventKind::ScalePeriodTick => self.on_tick(),
            EventKind::MonitorTick { job } => self.on_monitor(job),
            EventKind::ForceMove { job } => self.on_force_move(job),
        }
    }

    fn log(&mut self, record: Record) {
        let line = LogLine { time_ms: self.now, seq: self.lines.len() as u64, record };
        match &line.record {
            Record::Revert { .. } | Record::Rebalance { .. } | Record::Scaling { .. } => {
                log::debug!("t={} {:?}", line.time_ms, line.record)
            }
            _ => log::trace!("t={} {:?}", line.time_ms, line.record),
        }
        self.collector.observe(&line);
        self.lines.push(line);
    }

    fn flush_svc_log(&mut self) {
        let new: Vec<_> = self.svc.log[self.svc_logged..].to_vec();
        self.svc_logged = self.svc.log.len();
        for a in new {
            self.log(Record::Scaling { action: a.action, cluster: a.cluster, agg: a.agg, job: a.job });
        }
    }

    fn exec_of(&self, job: &JobId, task: TaskId) -> Ms {
        self.profiles[job].task(task).map_or(0, |t| t.exec_time_ms)
    }

    /// Extra transfer time of `bytes` through an interfered Aggregator.
    fn extra_ms(&self, agg: AggId, bytes: u64) -> Ms {
        match self.interference.get(&agg) {
            Some(&f) if f > 1.0 => {
                let base = bytes as f64 * 8.0 / (self.cfg.bandwidth_gbps * 1e6);
                (base * (f - 1.0)).ceil() as Ms
            }
            _ => 0,
        }
    }

    fn has_work(&self) -> bool {
        self.future_arrivals > 0 || !self.pending.is_empty() || self.jobs.values().any(|j| j.started && !j.exited)
    }

    fn in_use(&self, agg: AggId) -> bool {
        self.sessions.values().any(|s| s.s.from_agg == agg || s.s.to_agg == agg)
            || self
                .jobs
                .values()
                .filter(|j| j.started && !j.exited)
                .any(|j| j.tasks.values().any(|t| t.host == agg))
    }

    // ----- arrivals, exits, scaling

    fn on_arrive(&mut self, job: JobId) -> Result<()> {
        self.future_arrivals -= 1;
        let required_servers = self.profiles[&job].required_servers;
        self.log(Record::JobArrive { job: job.clone(), required_servers });
        if self.cfg.ondemand_threshold > 1 && self.jobs[&job].fixed_hosts.is_none() {
            let mut probe = self.svc.clone();
            let before = probe.log.len();
            probe.place_job(&self.profiles[&job], &self.profiles, &self.acfg)?;
            let needs_new = probe.log[before..]
                .iter()
                .any(|a| a.action == crate::scaling::ActionKind::AllocAgg);
            if needs_new && self.blocked + 1 < self.cfg.ondemand_threshold {
                self.blocked += 1;
                self.pending.push_back(job.clone());
                self.log(Record::JobBlocked { job });
                return Ok(());
            }
        }
        self.start_job(job)
    }

    fn start_job(&mut self, job: JobId) -> Result<()> {
        let profile = self.profiles[&job].clone();
        let arrival = match self.jobs[&job].fixed_hosts.clone() {
            Some(hosts) => self.svc.place_fixed(&profile, &hosts, &self.profiles)?,
            None => self.svc.place_job(&profile, &self.profiles, &self.acfg)?,
        };
        self.flush_svc_log();
        let hosts: Vec<AggId> = arrival.placement.assignment.aggregators().into_iter().collect();
        let rt = self.jobs.get_mut(&job).expect("job");
        rt.started = true;
        for t in &profile.tasks {
            let host = arrival.placement.assignment.entries[&t.key()];
            rt.tasks.insert(
                t.task_id,
                TaskRt { host, last_slot: None, expected: 0, aggregated: None, deferred: None },
            );
        }
        let duration = rt.duration_ms;
        self.log(Record::JobStart {
            job: job.clone(),
            cluster: arrival.cluster,
            required_servers: profile.required_servers,
            iter_duration_ms: profile.iter_duration_ms,
            hosts,
        });
        self.after_pool_change();
        self.queue.push(self.now, EventKind::IterationStart { job: job.clone(), iter: 0 });
        self.queue.push(self.now + duration, EventKind::JobExit { job });
        Ok(())
    }

    fn on_exit(&mut self, job: JobId) -> Result<()> {
        let Some(rt) = self.jobs.get_mut(&job) else {
            return Ok(());
        };
        if rt.exited {
            return Ok(());
        }
        rt.exited = true;
        if !rt.started {
            self.pending.retain(|j| *j != job);
            self.log(Record::JobExit { job });
            return Ok(());
        }
        rt.tasks.clear();
        let keys: Vec<TaskKey> = self.sessions.keys().filter(|k| k.job_id == job).cloned().collect();
        for k in keys {
            let s = self.sessions.remove(&k).expect("session");
            self.registry.finish(&k);
            self.log(Record::MigrationCancel { session: s.s.session_id, tensor: k });
        }
        let busy: BTreeSet<AggId> = self.aggs.keys().copied().filter(|a| self.in_use(*a)).collect();
        let out = self.svc.exit_job(&job, &self.profiles, &self.acfg, &|a| busy.contains(&a))?;
        self.log(Record::JobExit { job: job.clone() });
        for agg in out.emptied {
            if self.in_use(agg) {
                self.svc.set_status(agg, AggStatus::Draining);
            } else {
                self.svc.release(agg);
            }
        }
        for &agg in &out.recycle.drained {
            self.svc.set_status(agg, AggStatus::Draining);
        }
        self.flush_svc_log();
        self.after_pool_change();
        let moved: BTreeSet<JobId> = out.recycle.moves.iter().map(|(k, _, _)| k.job_id.clone()).collect();
        for j in moved {
            self.reconcile(&j)?;
        }
        self.release_idle();
        Ok(())
    }

    fn on_tick(&mut self) -> Result<()> {
        if !self.has_work() {
            return Ok(());
        }
        let mut peaks = self.peak.clone();
        if !self.pending.is_empty() {
            if let Some(first) = self.svc.clusters.keys().next() {
                *peaks.entry(*first).or_default() += self.pending.len();
            }
        }
        self.svc.periodic_rescale(&peaks);
        self.flush_svc_log();
        self.log(Record::Tick);
        self.blocked = 0;
        while let Some(job) = self.pending.pop_front() {
            self.start_job(job)?;
        }
        self.peak.clear();
        self.update_peak();
        self.queue.push(self.now + self.cfg.scaling_period_s * 1000, EventKind::ScalePeriodTick);
        Ok(())
    }

    fn update_peak(&mut self) {
        for c in self.svc.clusters.values() {
            let p = self.peak.entry(c.cluster_id).or_default();
            *p = (*p).max(c.busy_count());
        }
    }

    /// Rebuilds timetables of Aggregators whose schedule changed and restarts
    /// monitoring of the jobs on them.
    fn after_pool_change(&mut self) {
        let mut changed = BTreeSet::new();
        for agg in self.svc.aggs() {
            let rt = self.aggs.entry(agg.agg_id).or_default();
            if rt.table.cycle != agg.cycle_ms || rt.table.source != agg.slot_schedule {
                rt.table = Timetable::build(agg.cycle_ms, &agg.slot_schedule);
                changed.insert(agg.agg_id);
            }
        }
        let live: BTreeSet<AggId> = self.svc.aggs().map(|a| a.agg_id).collect();
        self.aggs.retain(|a, _| live.contains(a));
        let touched: Vec<JobId> = self
            .jobs
            .values()
            .filter(|j| j.started && !j.exited)
            .filter(|j| j.tasks.values().any(|t| changed.contains(&t.host)) || self.svc_hosts(&j.profile.job_id, &changed))
            .map(|j| j.profile.job_id.clone())
            .collect();
        for j in touched {
            self.jobs.get_mut(&j).expect("job").reset_window();
        }
        self.update_peak();
    }

    fn svc_hosts(&self, job: &JobId, set: &BTreeSet<AggId>) -> bool {
        set.iter().any(|a| self.svc.agg(*a).is_some_and(|s| s.hosts_job(job)))
    }

    fn release_idle(&mut self) {
        let idle: Vec<AggId> = self
            .svc
            .aggs()
            .filter(|a| a.status == AggStatus::Draining && a.is_empty())
            .map(|a| a.agg_id)
            .collect();
        for agg in idle {
            if !self.in_use(agg) {
                self.svc.release(agg);
            }
        }
        self.flush_svc_log();
        let live: BTreeSet<AggId> = self.svc.aggs().map(|a| a.agg_id).collect();
        self.aggs.retain(|a, _| live.contains(a));
    }

    // ----- iterations

    fn on_iteration_start(&mut self, job: JobId, iter: u64) {
        let cfg_prob = self.cfg.straggler_prob;
        let max_frac = self.cfg.straggler_max_frac;
        let Some(rt) = self.jobs.get_mut(&job) else { return };
        if rt.exited {
            return;
        }
        rt.iter = iter;
        rt.iter_start = self.now;
        rt.iter_lag.clear();
        rt.outstanding = rt.tasks.len();
        let mut delay = rt.stragglers.remove(&iter).unwrap_or(0);
        if cfg_prob > 0.0 && self.rng.random_bool(cfg_prob) {
            let cap = ((rt.profile.iter_duration_ms as f64 * max_frac) as Ms).max(1);
            delay += self.rng.random_range(1..=cap);
        }
        if delay > 0 {
            self.log(Record::Straggler { job: job.clone(), iteration: iter, delay_ms: delay });
        }
        let rt = &self.jobs[&job];
        let workers = rt.profile.num_workers as u64;
        let mut pushes = Vec::with_capacity(rt.tasks.len());
        for (i, task) in rt.profile.tasks.iter().enumerate() {
            let host = rt.tasks[&task.task_id].host;
            let expected = self.now + rt.profile.tensor_ready_offsets_ms[i];
            let extra = self.extra_ms(host, task.size_bytes * workers);
            pushes.push((task.task_id, expected, expected + delay + extra));
        }
        let rt = self.jobs.get_mut(&job).expect("job");
        for (task, expected, arrival) in pushes {
            rt.tasks.get_mut(&task).expect("task").expected = expected;
            self.queue.push(arrival, EventKind::TensorPush { job: job.clone(), task, iter });
        }
    }

    fn live(&self, job: &JobId, iter: u64) -> bool {
        self.jobs.get(job).is_some_and(|j| j.started && !j.exited && j.iter == iter)
    }

    fn on_push(&mut self, job: JobId, task: TaskId, iter: u64) {
        if !self.live(&job, iter) {
            return;
        }
        let key = TaskKey::new(job.clone(), task);
        let host = self.jobs[&job].tasks[&task].host;
        let workers = self.jobs[&job].profile.num_workers;
        let mut done_msg = false;
        let mut deferred = false;
        if let Some(sess) = self.sessions.get_mut(&key) {
            if host == sess.s.to_agg {
                for agent in 0..workers {
                    match sess.s.on_push_at_new(agent, false) {
                        Ok(r) => {
                            deferred |= !r.execute;
                            done_msg |= r.worker_done.is_some();
                        }
                        Err(e) => self.stats.protocol_errors.push(e.to_string()),
                    }
                }
            } else {
                for agent in 0..workers {
                    if let Err(e) = sess.s.on_push_at_old(agent) {
                        self.stats.protocol_errors.push(e.to_string());
                    }
                }
            }
        }
        if done_msg {
            self.migration_msg(&key, MsgKind::WorkerDone);
        }
        if deferred {
            self.jobs.get_mut(&job).expect("job").tasks.get_mut(&task).expect("task").deferred = Some(self.now);
        } else {
            self.serve(&job, task, iter, host, self.now);
        }
        if done_msg && self.sessions.get_mut(&key).is_some_and(|s| s.s.on_pmaster(MsgKind::WorkerDone)) {
            self.finish_session(&key);
        }
    }

    /// Picks the execution start of a request arriving at `t` and schedules it.
    fn serve(&mut self, job: &JobId, task: TaskId, iter: u64, host: AggId, t: Ms) {
        let key = TaskKey::new(job.clone(), task);
        let exec = self.exec_of(job, task);
        let (expected, last) = {
            let tr = &self.jobs[job].tasks[&task];
            (tr.expected, tr.last_slot)
        };
        let Some(agg) = self.aggs.get_mut(&host) else {
            self.stats.protocol_errors.push(format!("{key} sent to unknown {host}"));
            return;
        };
        agg.extras.retain(|&(_, e)| e + agg.table.cycle >= t);
        let table = &agg.table;
        // `own` marks starts that consume one of the task's reserved slots.
        let (start, own, late) = match table.next_instance(&key, expected, last) {
            Some(slot) if t <= slot => (slot, true, None),
            Some(_) => {
                let own_next = table.next_instance(&key, t, last).expect("task has slots");
                match handle_late_request(table.cycle, &table.slots, &agg.extras, t, exec) {
                    // Slack that starts no earlier than the task's own slot gains nothing.
                    LateDecision::ExecuteNow(s) if s < own_next => {
                        agg.extras.push((s, s + exec));
                        (s, false, Some(false))
                    }
                    _ => (own_next, true, Some(true)),
                }
            }
            None => {
                let s = first_gap(table.cycle, &table.slots, &agg.extras, t, exec);
                agg.extras.push((s, s + exec));
                (s, false, None)
            }
        };
        if own {
            self.jobs.get_mut(job).expect("job").tasks.get_mut(&task).expect("task").last_slot = Some(start);
        }
        if let Some(postponed) = late {
            self.log(Record::Late { job: job.clone(), tensor: key, agg: host, postponed });
        }
        self.queue.push(start, EventKind::AggSlotStart { job: job.clone(), task, iter, agg: host });
    }

    fn on_slot_end(&mut self, job: JobId, task: TaskId, iter: u64, agg: AggId) {
        if !self.live(&job, iter) {
            return;
        }
        let bytes = self.profiles[&job].task(task).map_or(0, |t| t.size_bytes) * self.profiles[&job].num_workers as u64;
        let extra = self.extra_ms(agg, bytes);
        let egress = self.aggs.get(&agg).map_or(0, |a| a.egress_free);
        let tr = self.jobs.get_mut(&job).expect("job").tasks.get_mut(&task).expect("task");
        if tr.aggregated == Some(iter) {
            self.stats.conservation_violations += 1;
        }
        tr.aggregated = Some(iter);
        self.stats.aggregations += 1;
        let at = (self.now + extra).max(egress);
        self.queue.push(at, EventKind::PullResponse { job, task, iter, agg });
    }

    fn on_pull(&mut self, job: JobId, task: TaskId, iter: u64, agg: AggId) {
        if !self.live(&job, iter) {
            return;
        }
        let key = TaskKey::new(job.clone(), task);
        let overhead = self.cfg.per_message_overhead_ms;
        let workers = self.jobs[&job].profile.num_workers;
        {
            let rt = self.jobs.get_mut(&job).expect("job");
            let lag = rt.iter_lag.entry(agg).or_default();
            *lag = (*lag).max(self.now - rt.iter_start);
        }
        let mut start_copy = false;
        let mut redirected = None;
        if let Some(sess) = self.sessions.get_mut(&key).filter(|s| s.s.from_agg == agg) {
            for agent in 0..workers {
                let (to, go) = sess.s.on_pull(agent);
                if let Some(to) = to {
                    sess.s.on_agent_redirect(agent);
                    redirected = Some(to);
                }
                start_copy |= go;
            }
        }
        if let Some(to) = redirected {
            self.migration_msg(&key, MsgKind::PullResponseWithRedirect);
            let rt = self.jobs.get_mut(&job).expect("job");
            rt.tasks.get_mut(&task).expect("task").host = to;
            rt.redirect_ms += overhead;
            let st = rt.stall.get_or_insert((0, 0));
            st.0 += overhead;
        }
        if start_copy {
            self.start_copy(&key, agg);
        }
        let rt = self.jobs.get_mut(&job).expect("job");
        rt.outstanding -= 1;
        if rt.outstanding == 0 {
            self.on_iteration_end(job);
        }
    }

    fn on_iteration_end(&mut self, job: JobId) {
        let now = self.now;
        let record = self.record_completions;
        let monitor_every = self.acfg.monitor_iterations;
        let rt = self.jobs.get_mut(&job).expect("job");
        for t in rt.tasks.values() {
            if t.aggregated != Some(rt.iter) {
                self.stats.conservation_violations += 1;
            }
        }
        if record {
            rt.completions.push(now);
        }
        match rt.win_start {
            None => {
                rt.win_start = Some(now);
                rt.win_iters = 0;
                rt.lag.clear();
            }
            Some(_) => {
                rt.win_iters += 1;
                for (agg, l) in std::mem::take(&mut rt.iter_lag) {
                    *rt.lag.entry(agg).or_default() += l;
                }
            }
        }
        if rt.win_iters >= monitor_every {
            self.queue.push(now, EventKind::MonitorTick { job: job.clone() });
        }
        let next = now + std::mem::take(&mut rt.redirect_ms);
        let iter = rt.iter + 1;
        self.queue.push(next, EventKind::IterationStart { job, iter });
    }

    // ----- feedback

    fn on_monitor(&mut self, job: JobId) -> Result<()> {
        let rt = self.jobs.get_mut(&job).expect("job");
        let Some(start) = rt.win_start else { return Ok(()) };
        if rt.exited || rt.win_iters < self.acfg.monitor_iterations {
            return Ok(());
        }
        let span = self.now - start;
        let iters = rt.win_iters;
        let runtime = JobRuntime::new(job.clone(), Rational::new(span, iters), iters);
        let decision = feedback_check(&runtime, &rt.profile, &self.acfg)?;
        let loss = measured_loss(&runtime, &rt.profile).to_f64().unwrap_or(0.0);
        let lag = std::mem::take(&mut rt.lag);
        rt.win_start = Some(self.now);
        rt.win_iters = 0;
        self.log(Record::Monitor { job: job.clone(), iterations: iters, span_ms: span, loss, decision });
        let migrating = self.sessions.keys().any(|k| k.job_id == job);
        let rt = self.jobs.get_mut(&job).expect("job");
        match decision {
            Feedback::Keep => rt.probation = false,
            Feedback::Revert if migrating => {}
            Feedback::Revert if rt.probation => {
                if rt.reverts < rt.profile.required_servers {
                    self.revert(&job)?;
                } else {
                    rt.probation = false;
                }
            }
            Feedback::Revert => self.rebalance(&job, &lag)?,
        }
        Ok(())
    }

    fn revert(&mut self, job: &JobId) -> Result<()> {
        let hosts = self.svc.job_hosts(job);
        let profile = self.profiles[job].clone();
        let rt = self.jobs.get_mut(job).expect("job");
        rt.reverts += 1;
        rt.blacklist.extend(hosts.iter().copied());
        let mut blacklist = rt.blacklist.clone();
        if rt.reverts >= profile.required_servers {
            // Last allowed revert: the job gets Aggregators of its own.
            blacklist.extend(self.svc.aggs().filter(|a| a.assigned.keys().any(|j| j != job)).map(|a| a.agg_id));
        }
        self.log(Record::Revert { job: job.clone(), hosts: hosts.into_iter().collect() });
        self.svc.revert_job(&profile, &blacklist, &self.profiles, &self.acfg)?;
        self.flush_svc_log();
        self.after_pool_change();
        self.reconcile(job)
    }

    /// Moves the job's tasks off the host whose pulls finish last.
    fn rebalance(&mut self, job: &JobId, lag: &BTreeMap<AggId, Ms>) -> Result<()> {
        let rt = &self.jobs[job];
        if rt.rebalances >= rt.profile.required_servers {
            return Ok(());
        }
        let Some((&suspect, _)) = lag.iter().max_by_key(|(a, &l)| (l, std::cmp::Reverse(**a)))
        else {
            return Ok(());
        };
        let profile = self.profiles[job].clone();
        let busy: BTreeSet<AggId> = self.sessions.values().flat_map(|s| [s.s.from_agg, s.s.to_agg]).collect();
        let moved = self
            .svc
            .move_tasks_off(&profile, suspect, self.cfg.allow_new_aggs, &self.profiles, &self.acfg, &|a| busy.contains(&a))?
            .is_some();
        self.log(Record::Rebalance { job: job.clone(), from: suspect, moved });
        if moved {
            self.jobs.get_mut(job).expect("job").rebalances += 1;
            self.flush_svc_log();
            self.after_pool_change();
            self.reconcile(job)?;
            self.release_idle();
        }
        Ok(())
    }

    fn on_force_move(&mut self, job: JobId) -> Result<()> {
        if !self.jobs.get(&job).is_some_and(|j| j.started && !j.exited) {
            return Ok(());
        }
        let hosts = self.svc.job_hosts(&job);
        let profile = self.profiles[&job].clone();
        self.svc.reassign_job(&profile, &hosts, &self.profiles, &self.acfg)?;
        for agg in hosts {
            if self.svc.agg(agg).is_some_and(|a| a.is_empty()) {
                self.svc.set_status(agg, AggStatus::Draining);
            }
        }
        self.flush_svc_log();
        self.after_pool_change();
        self.reconcile(&job)
    }

    // ----- migration

    /// Starts sessions for tasks whose pool placement differs from where
    /// their pushes currently go.
    fn reconcile(&mut self, job: &JobId) -> Result<()> {
        let Some(rt) = self.jobs.get(job) else { return Ok(()) };
        if !rt.started || rt.exited {
            return Ok(());
        }
        let Some(cluster) = self.svc.cluster_of_job(job) else { return Ok(()) };
        let aggs = &self.svc.clusters[&cluster].aggregators;
        let mut todo = Vec::new();
        for (tid, tr) in &rt.tasks {
            let key = TaskKey::new(job.clone(), *tid);
            if self.sessions.contains_key(&key) {
                continue;
            }
            if let Some(target) = task_host(aggs, &key) {
                if target != tr.host {
                    let idle = tr.aggregated == Some(rt.iter) || rt.outstanding == 0;
                    todo.push((key, tr.host, target, idle));
                }
            }
        }
        let workers = rt.profile.num_workers;
        for (key, from, to, idle) in todo {
            let size = self.profiles[job].task(key.task_id).map_or(0, |t| t.size_bytes);
            let (mut session, _) = initiate_migration(&mut self.registry, key.clone(), from, to, workers, size)
                .map_err(|e| ScheduleError::InvalidConfig(e.to_string()))?;
            let pulled: BTreeSet<u32> = if idle { (0..workers).collect() } else { BTreeSet::new() };
            if let Err(e) = session.on_init_delivered(&pulled) {
                self.stats.protocol_errors.push(e.to_string());
            }
            self.sessions.insert(key.clone(), SimSession { s: session });
            self.migration_msg(&key, MsgKind::MigrateInit);
        }
        self.jobs.get_mut(job).expect("job").reset_window();
        Ok(())
    }

    fn migration_msg(&mut self, key: &TaskKey, msg: MsgKind) {
        if let Some(s) = self.sessions.get(key) {
            let r = Record::Migration { session: s.s.session_id, tensor: key.clone(), msg, from: s.s.from_agg, to: s.s.to_agg };
            self.log(r);
        }
    }

    fn start_copy(&mut self, key: &TaskKey, from: AggId) {
        let Some(sess) = self.sessions.get_mut(key) else { return };
        if let Err(e) = sess.s.start_copy() {
            self.stats.protocol_errors.push(e.to_string());
            return;
        }
        let size = sess.s.size_bytes;
        self.migration_msg(key, MsgKind::TensorCopy);
        let base = copy_time_ms(size, self.cfg.bandwidth_gbps, self.cfg.per_message_overhead_ms);
        let dur = base + self.extra_ms(from, size);
        let egress = self.aggs.get(&from).map_or(0, |a| a.egress_free);
        let done = self.now.max(egress) + dur;
        if let Some(a) = self.aggs.get_mut(&from) {
            a.egress_free = done;
        }
        self.queue.push(done, EventKind::MigrationMsg { job: key.job_id.clone(), task: key.task_id });
    }

    fn on_copy_arrived(&mut self, job: JobId, task: TaskId) -> Result<()> {
        let key = TaskKey::new(job.clone(), task);
        let Some(sess) = self.sessions.get_mut(&key) else { return Ok(()) };
        if let Err(e) = sess.s.on_copy_complete() {
            self.stats.protocol_errors.push(e.to_string());
            return Ok(());
        }
        let to = sess.s.to_agg;
        self.migration_msg(&key, MsgKind::TensorCopyDone);
        let rt = self.jobs.get_mut(&job).expect("job");
        let iter = rt.iter;
        if let Some(arrived) = rt.tasks.get_mut(&task).and_then(|t| t.deferred.take()) {
            let wait = self.now - arrived;
            let st = rt.stall.get_or_insert((0, 0));
            st.1 = st.1.max(wait);
            self.sessions.get_mut(&key).expect("session").s.stall_ms = wait;
            self.serve(&job, task, iter, to, self.now);
        }
        if self.sessions.get_mut(&key).is_some_and(|s| s.s.on_pmaster(MsgKind::TensorCopyDone)) {
            self.finish_session(&key);
        }
        Ok(())
    }

    fn finish_session(&mut self, key: &TaskKey) {
        let Some(sess) = self.sessions.remove(key) else { return };
        self.registry.finish(key);
        self.log(Record::MigrationDone {
            session: sess.s.session_id,
            tensor: key.clone(),
            from: sess.s.from_agg,
            to: sess.s.to_agg,
            wait_ms: sess.s.stall_ms,
        });
        let job = key.job_id.clone();
        if !self.sessions.keys().any(|k| k.job_id == job) {
            if let Some((redirect_ms, copy_wait_ms)) = self.jobs.get_mut(&job).and_then(|j| j.stall.take()) {
                self.log(Record::JobStall { job: job.clone(), redirect_ms, copy_wait_ms, stall_ms: redirect_ms + copy_wait_ms });
            }
        }
        self.release_idle();
        if let Err(e) = self.reconcile(&job) {
            self.stats.protocol_errors.push(e.to_string());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> RunConfig {
        RunConfig { monitor_iterations: 20, ..RunConfig::default() }
    }

    #[test]
    fn empty_trace_gives_empty_report() {
        let out = Engine::new(cfg(), vec![]).unwrap().run().unwrap();
        assert_eq!(out.report.peak_allocated, 0);
        assert!(out.report.intervals.is_empty());
    }

    #[test]
    fn standalone_job_runs_at_profile_speed() {
        let p = JobProfile::uniform("a", 1000, 2, 2, &[(200, 1), (200, 1)]);
        let mut e = Engine::new(cfg(), vec![SimJob::new(p, 0, 60_000)]).unwrap();
        e.record_completions(true);
        let out = e.run().unwrap();
        let c = &out.completions[&JobId::new("a")];
        let steady: Vec<Ms> = c.windows(2).skip(2).map(|w| w[1] - w[0]).collect();
        assert!(steady.iter().all(|&d| d == 1000), "{steady:?}");
        assert_eq!(out.stats.conservation_violations, 0);
        assert!(out.report.jobs[0].normalized_perf > 0.99);
    }

    #[test]
    fn iteration_matches_effective_iteration() {
        // J1 (D=6) shares with J2 (D=12): both should settle at 6 and 12.
        let a = JobProfile::uniform("a", 600, 1, 2, &[(200, 1)]);
        let b = JobProfile::uniform("b", 1200, 1, 2, &[(300, 1)]);
        let mut e = Engine::new(cfg(), vec![SimJob::new(a, 0, 60_000), SimJob::new(b, 1, 60_000)]).unwrap();
        e.record_completions(true);
        let out = e.run().unwrap();
        for (job, d) in [("a", 600.0), ("b", 1200.0)] {
            let c = &out.completions[&JobId::new(job)];
            let tail = &c[c.len() - 21..];
            let mean = (tail[20] - tail[0]) as f64 / 20.0;
            assert!((mean - d).abs() < 1e-9, "{job}: {mean}");
        }
    }
}
