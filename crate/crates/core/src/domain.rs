//! Core data model and cyclic-execution arithmetic.
//!
//! An Aggregator repeats a fixed execution cycle whose length is the largest
//! profiled iteration duration among its tenant jobs. A job with a shorter
//! iteration is served `floor(C / D)` times per cycle, so its effective
//! iteration becomes `C / floor(C / D)`. All times are integer milliseconds;
//! derived durations that are not whole milliseconds are kept as exact
//! rationals.

use std::collections::BTreeMap;
use std::fmt;

use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScheduleError};

/// Milliseconds of simulated or profiled time.
pub type Ms = u64;

/// Exact non-negative rational, used for effective iteration durations and losses.
pub type Rational = Ratio<u64>;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JobId(pub String);

impl JobId {
    pub fn new(id: impl Into<String>) -> Self {
        JobId(id.into())
    }
}

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for JobId {
    fn from(s: &str) -> Self {
        JobId(s.to_string())
    }
}

impl From<String> for JobId {
    fn from(s: String) -> Self {
        JobId(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u32);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AggId(pub u32);

impl fmt::Display for AggId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "agg{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClusterId(pub u32);

impl fmt::Display for ClusterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cluster{}", self.0)
    }
}

/// Identifies one tensor (aggregation task) across the whole service.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskKey {
    pub job_id: JobId,
    pub task_id: TaskId,
}

impl TaskKey {
    pub fn new(job_id: JobId, task_id: TaskId) -> Self {
        TaskKey { job_id, task_id }
    }
}

impl fmt::Display for TaskKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.job_id, self.task_id)
    }
}

/// One tensor's aggregation task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggTask {
    pub task_id: TaskId,
    pub job_id: JobId,
    /// CPU time of one aggregation.
    pub exec_time_ms: Ms,
    pub size_bytes: u64,
}

impl AggTask {
    pub fn key(&self) -> TaskKey {
        TaskKey::new(self.job_id.clone(), self.task_id)
    }
}

/// Profiled description of a training job.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobProfile {
    pub job_id: JobId,
    pub iter_duration_ms: Ms,
    pub tasks: Vec<AggTask>,
    pub required_servers: u32,
    pub num_workers: u32,
    /// Parallel to `tasks`: offset within an iteration at which the push arrives.
    pub tensor_ready_offsets_ms: Vec<Ms>,
}

impl JobProfile {
    /// Builds a profile from `(exec_time_ms, size_bytes)` pairs. Task ids are
    /// assigned in order and ready offsets use the backward-phase default.
    pub fn uniform(
        job_id: impl Into<JobId>,
        iter_duration_ms: Ms,
        required_servers: u32,
        num_workers: u32,
        tasks: &[(Ms, u64)],
    ) -> Self {
        let job_id = job_id.into();
        let tasks: Vec<AggTask> = tasks
            .iter()
            .enumerate()
            .map(|(i, &(exec_time_ms, size_bytes))| AggTask {
                task_id: TaskId(i as u32),
                job_id: job_id.clone(),
                exec_time_ms,
                size_bytes,
            })
            .collect();
        let offsets = default_ready_offsets(iter_duration_ms, tasks.len())
            .into_iter()
            .zip(&tasks)
            .map(|(off, t)| off.min(iter_duration_ms.saturating_sub(t.exec_time_ms)))
            .collect();
        JobProfile {
            job_id,
            iter_duration_ms,
            tasks,
            required_servers,
            num_workers,
            tensor_ready_offsets_ms: offsets,
        }
    }

    pub fn with_offsets(mut self, offsets: Vec<Ms>) -> Self {
        self.tensor_ready_offsets_ms = offsets;
        self
    }

    /// Renames the job, carrying the new id into every task.
    pub fn renamed(&self, job_id: impl Into<JobId>) -> Self {
        let job_id = job_id.into();
        let mut p = self.clone();
        for t in &mut p.tasks {
            t.job_id = job_id.clone();
        }
        p.job_id = job_id;
        p
    }

    pub fn total_exec_ms(&self) -> Ms {
        self.tasks.iter().map(|t| t.exec_time_ms).sum()
    }

    pub fn task(&self, task_id: TaskId) -> Option<&AggTask> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    pub fn ready_offset(&self, task_id: TaskId) -> Ms {
        self.tasks
            .iter()
            .position(|t| t.task_id == task_id)
            .and_then(|i| self.tensor_ready_offsets_ms.get(i).copied())
            .unwrap_or(0)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.iter_duration_ms == 0 {
            return Err(format!("job {}: iter_duration_ms must be positive", self.job_id));
        }
        if self.required_servers == 0 || self.num_workers == 0 {
            return Err(format!(
                "job {}: required_servers and num_workers must be at least 1",
                self.job_id
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tasks {
            if t.exec_time_ms == 0 || t.size_bytes == 0 {
                return Err(format!(
                    "job {} task {}: exec_time_ms and size_bytes must be positive",
                    self.job_id, t.task_id.0
                ));
            }
            if t.job_id != self.job_id {
                return Err(format!("job {} task {}: owner mismatch", self.job_id, t.task_id.0));
            }
            if !seen.insert(t.task_id) {
                return Err(format!("job {}: duplicate task id {}", self.job_id, t.task_id.0));
            }
        }
        if self.tensor_ready_offsets_ms.len() != self.tasks.len() {
            return Err(format!("job {}: one ready offset per task expected", self.job_id));
        }
        for (t, &off) in self.tasks.iter().zip(&self.tensor_ready_offsets_ms) {
            if off + t.exec_time_ms > self.iter_duration_ms {
                return Err(format!(
                    "job {} task {}: ready offset {off} ms plus aggregation {} ms exceeds the iteration",
                    self.job_id, t.task_id.0, t.exec_time_ms
                ));
            }
        }
        let capacity = self.iter_duration_ms * self.required_servers as u64;
        if self.total_exec_ms() > capacity {
            return Err(format!(
                "job {}: total aggregation time {} ms exceeds {} ms of declared servers",
                self.job_id,
                self.total_exec_ms(),
                capacity
            ));
        }
        Ok(())
    }
}

/// Evenly spaced push arrivals over the backward half of the iteration. The
/// last task (the first layer) is produced last by back-propagation.
pub fn default_ready_offsets(iter_duration_ms: Ms, n: usize) -> Vec<Ms> {
    if n == 0 {
        return Vec::new();
    }
    let half = iter_duration_ms / 2;
    let span = iter_duration_ms - half;
    (0..n)
        .map(|i| half + (n - 1 - i) as u64 * span / n as u64)
        .collect()
}

/// Measured state of a running job.
#[derive(Debug, Clone, PartialEq)]
pub struct JobRuntime {
    pub job_id: JobId,
    pub current_iter_duration_ms: Rational,
    pub measured_speed: f64,
    pub iterations_observed: u64,
}

impl JobRuntime {
    pub fn new(job_id: JobId, current_iter_duration_ms: Rational, iterations_observed: u64) -> Self {
        let measured_speed = if current_iter_duration_ms.is_zero() {
            0.0
        } else {
            1000.0 / current_iter_duration_ms.to_f64().unwrap_or(f64::INFINITY)
        };
        JobRuntime {
            job_id,
            current_iter_duration_ms,
            measured_speed,
            iterations_observed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggStatus {
    Active,
    Draining,
    Released,
}

/// One reserved execution slot inside an Aggregator's cycle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub job_id: JobId,
    pub task_id: TaskId,
    /// Which repetition of the job inside the cycle this slot serves.
    pub rep: u32,
    pub start_ms: Ms,
    pub duration_ms: Ms,
}

impl Slot {
    pub fn end_ms(&self) -> Ms {
        self.start_ms + self.duration_ms
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregatorState {
    pub agg_id: AggId,
    pub cluster_id: ClusterId,
    pub assigned: BTreeMap<JobId, Vec<AggTask>>,
    pub cycle_ms: Ms,
    pub slot_schedule: Vec<Slot>,
    pub placement: Placement,
    pub status: AggStatus,
    /// Phase each job got in the current slot schedule.
    pub phases: BTreeMap<JobId, Ms>,
    /// Preferred `(cycle, phase)` per job, tried first when rescheduling.
    pub phase_hints: BTreeMap<JobId, (Ms, Ms)>,
}

impl AggregatorState {
    pub fn new(agg_id: AggId, cluster_id: ClusterId) -> Self {
        AggregatorState {
            agg_id,
            cluster_id,
            assigned: BTreeMap::new(),
            cycle_ms: 0,
            slot_schedule: Vec::new(),
            placement: Placement::Aligned,
            status: AggStatus::Active,
            phases: BTreeMap::new(),
            phase_hints: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.assigned.values().all(|v| v.is_empty())
    }

    pub fn task_count(&self) -> usize {
        self.assigned.values().map(Vec::len).sum()
    }

    pub fn hosts_job(&self, job: &JobId) -> bool {
        self.assigned.get(job).is_some_and(|v| !v.is_empty())
    }

    pub fn hosts_task(&self, key: &TaskKey) -> bool {
        self.assigned
            .get(&key.job_id)
            .is_some_and(|v| v.iter().any(|t| t.task_id == key.task_id))
    }

    pub fn job_exec_ms(&self, job: &JobId) -> Ms {
        self.assigned
            .get(job)
            .map(|v| v.iter().map(|t| t.exec_time_ms).sum())
            .unwrap_or(0)
    }

    pub fn add_task(&mut self, task: AggTask) {
        let tasks = self.assigned.entry(task.job_id.clone()).or_default();
        tasks.push(task);
        tasks.sort_by_key(|t| t.task_id);
    }

    pub fn remove_task(&mut self, key: &TaskKey) -> Option<AggTask> {
        let tasks = self.assigned.get_mut(&key.job_id)?;
        let pos = tasks.iter().position(|t| t.task_id == key.task_id)?;
        let task = tasks.remove(pos);
        if tasks.is_empty() {
            self.assigned.remove(&key.job_id);
        }
        Some(task)
    }

    pub fn remove_job(&mut self, job: &JobId) -> Vec<AggTask> {
        self.assigned.remove(job).unwrap_or_default()
    }

    /// Recomputes the cycle and slot schedule from the assigned tasks.
    pub fn refresh(&mut self, profiles: &Profiles) -> Result<()> {
        let assigned = &self.assigned;
        self.phase_hints.retain(|j, _| assigned.contains_key(j));
        let schedule = build_schedule(self, profiles)?;
        self.cycle_ms = cycle_of(self, profiles)?;
        self.slot_schedule = schedule.slots;
        self.placement = schedule.placement;
        self.phases = schedule.phases;
        Ok(())
    }

    /// Scheduled time per cycle divided by the cycle; 0 for an empty Aggregator.
    pub fn load(&self) -> f64 {
        if self.cycle_ms == 0 {
            return 0.0;
        }
        let busy: Ms = self.slot_schedule.iter().map(|s| s.duration_ms).sum();
        busy as f64 / self.cycle_ms as f64
    }

    /// Free slot time at the current cycle, computed from local effective iterations.
    pub fn current_free_ms(&self, profiles: &Profiles) -> Result<Ms> {
        let iters = local_iterations(self, self.cycle_ms, profiles)?;
        free_slots(self, self.cycle_ms, &iters)
    }
}

/// Profile lookup shared by every scheduling routine.
pub type Profiles = BTreeMap<JobId, JobProfile>;

/// Relational form of the task → Aggregator placement.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Assignment {
    pub entries: BTreeMap<TaskKey, AggId>,
}

impl Assignment {
    pub fn from_aggregators<'a>(aggs: impl IntoIterator<Item = &'a AggregatorState>) -> Self {
        let mut entries = BTreeMap::new();
        for agg in aggs {
            for task in agg.assigned.values().flatten() {
                entries.insert(task.key(), agg.agg_id);
            }
        }
        Assignment { entries }
    }

    pub fn placements(&self) -> Vec<(TaskKey, AggId)> {
        self.entries.iter().map(|(k, a)| (k.clone(), *a)).collect()
    }

    pub fn aggregators(&self) -> std::collections::BTreeSet<AggId> {
        self.entries.values().copied().collect()
    }

    pub fn aggregators_of(&self, job: &JobId) -> std::collections::BTreeSet<AggId> {
        self.entries
            .iter()
            .filter(|(k, _)| &k.job_id == job)
            .map(|(_, a)| *a)
            .collect()
    }
}

/// Execution cycle of an Aggregator hosting `jobs`: the largest profiled
/// iteration duration, or 0 when empty.
pub fn compute_cycle<'a>(jobs: impl IntoIterator<Item = &'a JobProfile>) -> Ms {
    jobs.into_iter().map(|j| j.iter_duration_ms).max().unwrap_or(0)
}

pub(crate) fn cycle_of(agg: &AggregatorState, profiles: &Profiles) -> Result<Ms> {
    let mut cycle = 0;
    for job in agg.assigned.keys() {
        let p = profiles
            .get(job)
            .ok_or_else(|| ScheduleError::UnknownJob(job.clone()))?;
        cycle = cycle.max(p.iter_duration_ms);
    }
    Ok(cycle)
}

/// Effective iteration of a job with profiled duration `iter_ms` on a cycle of
/// `cycle_ms`: `max(D, C / floor(C / D))`.
pub fn effective_iteration(iter_ms: Ms, cycle_ms: Ms) -> Result<Rational> {
    if iter_ms == 0 {
        return Err(ScheduleError::ZeroDuration);
    }
    if cycle_ms < iter_ms {
        return Err(ScheduleError::CycleTooShort { cycle_ms, iter_ms });
    }
    let reps = cycle_ms / iter_ms;
    let d = Rational::new(cycle_ms, reps);
    Ok(d.max(Rational::from_integer(iter_ms)))
}

/// How many times a job with effective iteration `d` runs within `cycle_ms`.
pub fn repetitions(cycle_ms: Ms, d: Rational) -> u64 {
    if d.is_zero() {
        return 0;
    }
    (Rational::from_integer(cycle_ms) / d).to_integer()
}

/// Fractional slowdown `(d - D) / d`.
pub fn perf_loss(iter_ms: Ms, d: Rational) -> Result<Rational> {
    if iter_ms == 0 {
        return Err(ScheduleError::ZeroDuration);
    }
    let base = Rational::from_integer(iter_ms);
    if d < base {
        return Err(ScheduleError::DurationBelowProfile);
    }
    Ok((d - base) / d)
}

/// Local effective iteration of each job on `agg` when its cycle is `cycle_ms`.
pub(crate) fn local_iterations(
    agg: &AggregatorState,
    cycle_ms: Ms,
    profiles: &Profiles,
) -> Result<BTreeMap<JobId, Rational>> {
    agg.assigned
        .keys()
        .map(|job| {
            let p = profiles
                .get(job)
                .ok_or_else(|| ScheduleError::UnknownJob(job.clone()))?;
            Ok((job.clone(), effective_iteration(p.iter_duration_ms, cycle_ms)?))
        })
        .collect()
}

/// Free CPU time per cycle: `C - sum_j floor(C / d_j) * sum_{t on agg} e_t`.
pub fn free_slots(
    agg: &AggregatorState,
    est_cycle_ms: Ms,
    est_iters: &BTreeMap<JobId, Rational>,
) -> Result<Ms> {
    let mut used: Ms = 0;
    for (job, tasks) in &agg.assigned {
        if tasks.is_empty() {
            continue;
        }
        let d = est_iters
            .get(job)
            .ok_or_else(|| ScheduleError::MissingEstimate(job.clone()))?;
        let exec: Ms = tasks.iter().map(|t| t.exec_time_ms).sum();
        used += repetitions(est_cycle_ms, *d) * exec;
    }
    est_cycle_ms
        .checked_sub(used)
        .ok_or_else(|| ScheduleError::Overloaded {
            agg: agg.agg_id,
            deficit_ms: used - est_cycle_ms,
        })
}

/// How closely a slot schedule follows push arrival times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Every slot starts after its push can arrive and ends inside its repetition window.
    Aligned,
    /// Windows are respected but some slot precedes its push arrival.
    Relaxed,
    /// Back-to-back placement; only the cycle budget is respected.
    Compact,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub slots: Vec<Slot>,
    pub placement: Placement,
    pub phases: BTreeMap<JobId, Ms>,
}

/// Busy intervals of one cycle, viewed as a circle of length `cycle`.
#[derive(Clone)]
struct Timeline {
    cycle: Ms,
    busy: Vec<(Ms, Ms)>,
}

impl Timeline {
    /// Latest start `s` with `lo <= s` and `s + len <= hi` on the unrolled
    /// circle, not overlapping any busy interval nor crossing a cycle boundary.
    fn latest_fit(&self, lo: Ms, hi: Ms, len: Ms) -> Option<Ms> {
        let mut end = hi;
        loop {
            if end < lo + len {
                return None;
            }
            let start = end - len;
            let base = (end - 1) / self.cycle * self.cycle;
            if start < base {
                end = base;
                continue;
            }
            let (ls, le) = (start - base, end - base);
            match self
                .busy
                .iter()
                .filter(|&&(b0, b1)| b0 < le && b1 > ls)
                .map(|&(b0, _)| b0)
                .min()
            {
                Some(b0) => end = base + b0,
                None => return Some(start),
            }
        }
    }

    fn insert(&mut self, start: Ms, len: Ms) -> Ms {
        let s = start % self.cycle;
        let pos = self.busy.partition_point(|&(b0, _)| b0 < s);
        self.busy.insert(pos, (s, s + len));
        s
    }
}

struct JobPlan<'a> {
    job: &'a JobId,
    reps: u64,
    iter_ms: Ms,
    /// `(task, exec, ready offset)` sorted by ready offset descending.
    tasks: Vec<(TaskId, Ms, Ms)>,
}

fn job_plans<'a>(agg: &'a AggregatorState, profiles: &Profiles, cycle: Ms) -> Result<Vec<JobPlan<'a>>> {
    let mut plans = Vec::new();
    for (job, tasks) in &agg.assigned {
        let p = profiles
            .get(job)
            .ok_or_else(|| ScheduleError::UnknownJob(job.clone()))?;
        let mut ts: Vec<(TaskId, Ms, Ms)> = tasks
            .iter()
            .map(|t| (t.task_id, t.exec_time_ms, p.ready_offset(t.task_id)))
            .collect();
        ts.sort_by(|a, b| b.2.cmp(&a.2).then(b.0.cmp(&a.0)));
        plans.push(JobPlan {
            job,
            reps: cycle / p.iter_duration_ms,
            iter_ms: p.iter_duration_ms,
            tasks: ts,
        });
    }
    plans.sort_by(|a, b| {
        b.reps
            .cmp(&a.reps)
            .then(b.iter_ms.cmp(&a.iter_ms))
            .then(a.job.cmp(b.job))
    });
    Ok(plans)
}

fn window(cycle: Ms, reps: u64, r: u64) -> (Ms, Ms) {
    ((r * cycle).div_ceil(reps), (r + 1) * cycle / reps)
}

/// Places one job at phase `phase`, latest-fit within each repetition window.
fn place_job(
    tl: &mut Timeline,
    plan: &JobPlan<'_>,
    phase: Ms,
    honour_ready: bool,
    out: &mut Vec<Slot>,
) -> bool {
    let mut placed = Vec::new();
    let mut trial = tl.clone();
    for r in 0..plan.reps {
        let (ws, we) = window(tl.cycle, plan.reps, r);
        for &(task, exec, ready) in &plan.tasks {
            let lo = phase + ws + if honour_ready { ready } else { 0 };
            let Some(start) = trial.latest_fit(lo, phase + we, exec) else {
                return false;
            };
            let s = trial.insert(start, exec);
            placed.push(Slot {
                job_id: plan.job.clone(),
                task_id: task,
                rep: r as u32,
                start_ms: s,
                duration_ms: exec,
            });
        }
    }
    *tl = trial;
    out.extend(placed);
    true
}

fn phase_candidates(tl: &Timeline, plan: &JobPlan<'_>, hint: Option<Ms>) -> Vec<Ms> {
    let (_, first_end) = window(tl.cycle, plan.reps, 0);
    let mut out = Vec::new();
    let mut push = |p: Ms| {
        if !out.contains(&p) {
            out.push(p);
        }
    };
    if let Some(h) = hint {
        push(h % tl.cycle);
    }
    for &(b0, _) in &tl.busy {
        push(b0);
    }
    for &(b0, _) in &tl.busy {
        push((b0 + tl.cycle - first_end % tl.cycle) % tl.cycle);
    }
    push(0);
    out
}

type Phases = BTreeMap<JobId, Ms>;

fn place_all(
    plans: &[JobPlan<'_>],
    cycle: Ms,
    honour_ready: bool,
    hints: &BTreeMap<JobId, (Ms, Ms)>,
) -> std::result::Result<(Vec<Slot>, Phases), usize> {
    let mut tl = Timeline { cycle, busy: Vec::new() };
    let mut slots = Vec::new();
    let mut phases = Phases::new();
    for (i, plan) in plans.iter().enumerate() {
        let hint = hints.get(plan.job).filter(|h| h.0 == cycle).map(|h| h.1);
        let phase = phase_candidates(&tl, plan, hint)
            .into_iter()
            .find(|&phase| place_job(&mut tl, plan, phase, honour_ready, &mut slots));
        match phase {
            Some(p) => {
                phases.insert(plan.job.clone(), p);
            }
            None => return Err(i),
        }
    }
    Ok((slots, phases))
}

fn sort_slots(slots: &mut [Slot]) {
    slots.sort_by(|a, b| (a.start_ms, &a.job_id, a.task_id).cmp(&(b.start_ms, &b.job_id, b.task_id)));
}

/// Places every repetition of every task inside one cycle.
///
/// Each job gets a phase; repetition `r` owns `[phase + r*d, phase + (r+1)*d)`
/// on the circular cycle. A task's slot starts no earlier than its push can
/// arrive and is placed as late as its window allows, so that each job's
/// slots form a tight block ending at the window end. Jobs with more
/// repetitions are placed first; candidate phases abut existing blocks.
pub fn build_slot_schedule(agg: &AggregatorState, profiles: &Profiles) -> Result<Vec<Slot>> {
    let cycle = cycle_of(agg, profiles)?;
    if cycle == 0 {
        return Ok(Vec::new());
    }
    let plans = job_plans(agg, profiles, cycle)?;
    match place_all(&plans, cycle, true, &agg.phase_hints) {
        Ok((mut slots, _)) => {
            sort_slots(&mut slots);
            Ok(slots)
        }
        Err(i) => Err(ScheduleError::Infeasible {
            agg: agg.agg_id,
            job: plans[i].job.clone(),
            task: plans[i].tasks.last().map_or(TaskId(0), |t| t.0),
        }),
    }
}

/// Like [`build_slot_schedule`] but degrades instead of failing: first by
/// ignoring push arrival times, then by packing slots back to back.
pub fn build_schedule(agg: &AggregatorState, profiles: &Profiles) -> Result<Schedule> {
    let cycle = cycle_of(agg, profiles)?;
    if cycle == 0 {
        return Ok(Schedule { slots: Vec::new(), placement: Placement::Aligned, phases: Phases::new() });
    }
    let plans = job_plans(agg, profiles, cycle)?;
    for (honour, placement) in [(true, Placement::Aligned), (false, Placement::Relaxed)] {
        if let Ok((mut slots, phases)) = place_all(&plans, cycle, honour, &agg.phase_hints) {
            sort_slots(&mut slots);
            return Ok(Schedule { slots, placement, phases });
        }
    }
    let mut items: Vec<(Ms, Ms, &JobId, TaskId, u32, Ms)> = Vec::new();
    for plan in &plans {
        for r in 0..plan.reps {
            let (ws, we) = window(cycle, plan.reps, r);
            for &(task, exec, ready) in &plan.tasks {
                items.push((we, ws + ready, plan.job, task, r as u32, exec));
            }
        }
    }
    items.sort();
    let total: Ms = items.iter().map(|i| i.5).sum();
    if total > cycle {
        return Err(ScheduleError::Overloaded { agg: agg.agg_id, deficit_ms: total - cycle });
    }
    let mut at = 0;
    let mut slots = Vec::with_capacity(items.len());
    for (_, _, job, task, rep, exec) in items {
        slots.push(Slot { job_id: job.clone(), task_id: task, rep, start_ms: at, duration_ms: exec });
        at += exec;
    }
    Ok(Schedule { slots, placement: Placement::Compact, phases: Phases::new() })
}

/// Rebuilds `id`'s schedule, first offering each job the phase it already
/// has on another Aggregator of the pool so that its slots line up.
pub fn refresh_in_pool(aggs: &mut BTreeMap<AggId, AggregatorState>, id: AggId, profiles: &Profiles) -> Result<()> {
    let target = aggs.get(&id).ok_or(ScheduleError::UnknownAggregator(id))?;
    let mut hints = BTreeMap::new();
    for job in target.assigned.keys() {
        let other = aggs
            .values()
            .filter(|a| a.agg_id != id)
            .find_map(|a| a.phases.get(job).map(|&p| (a.cycle_ms, p)));
        if let Some(h) = other {
            hints.insert(job.clone(), h);
        }
    }
    let agg = aggs.get_mut(&id).expect("checked above");
    agg.phase_hints = hints;
    agg.refresh(profiles)
}

/// Checks that slots are non-overlapping and lie within `[0, cycle)`.
pub fn slots_well_formed(slots: &[Slot], cycle_ms: Ms) -> bool {
    let mut sorted: Vec<&Slot> = slots.iter().collect();
    sorted.sort_by_key(|s| s.start_ms);
    sorted.iter().all(|s| s.end_ms() <= cycle_ms)
        && sorted.windows(2).all(|w| w[0].end_ms() <= w[1].start_ms)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(n: u64, d: u64) -> Rational {
        Rational::new(n, d)
    }

    fn job(id: &str, d: Ms, execs: &[Ms]) -> JobProfile {
        let tasks: Vec<(Ms, u64)> = execs.iter().map(|&e| (e, 1024)).collect();
        let n = tasks.len();
        JobProfile::uniform(id, d, 4, 2, &tasks).with_offsets(vec![0; n])
    }

    fn agg_with(jobs: &[&JobProfile]) -> (AggregatorState, Profiles) {
        let mut agg = AggregatorState::new(AggId(0), ClusterId(0));
        let mut profiles = Profiles::new();
        for j in jobs {
            for t in &j.tasks {
                agg.add_task(t.clone());
            }
            profiles.insert(j.job_id.clone(), (*j).clone());
        }
        agg.refresh(&profiles).unwrap();
        (agg, profiles)
    }

    #[test]
    fn cycle_is_largest_iteration() {
        let j1 = job("j1", 6, &[2]);
        let j2 = job("j2", 12, &[3]);
        assert_eq!(compute_cycle([&j1]), 6);
        assert_eq!(compute_cycle([&j1, &j2]), 12);
        assert_eq!(compute_cycle(std::iter::empty()), 0);
    }

    #[test]
    fn effective_iteration_examples() {
        assert_eq!(effective_iteration(6, 12).unwrap(), r(6, 1));
        assert_eq!(effective_iteration(5, 12).unwrap(), r(6, 1));
        assert_eq!(effective_iteration(12, 12).unwrap(), r(12, 1));
        assert_eq!(effective_iteration(7, 12).unwrap(), r(12, 1));
        assert_eq!(effective_iteration(3, 10).unwrap(), r(10, 3));
        assert!(matches!(
            effective_iteration(13, 12),
            Err(ScheduleError::CycleTooShort { .. })
        ));
    }

    #[test]
    fn perf_loss_examples() {
        assert_eq!(perf_loss(5, r(6, 1)).unwrap(), r(1, 6));
        assert_eq!(perf_loss(12, r(12, 1)).unwrap(), r(0, 1));
        assert_eq!(perf_loss(6, r(6, 1)).unwrap(), r(0, 1));
        assert_eq!(perf_loss(6, r(5, 1)), Err(ScheduleError::DurationBelowProfile));
    }

    #[test]
    fn free_slots_examples() {
        let j1 = job("j1", 6, &[2]);
        let j2 = job("j2", 12, &[3]);
        let (agg, _) = agg_with(&[&j1, &j2]);
        let iters = BTreeMap::from([(j1.job_id.clone(), r(6, 1)), (j2.job_id.clone(), r(12, 1))]);
        assert_eq!(free_slots(&agg, 12, &iters).unwrap(), 5);

        let (single, _) = agg_with(&[&j1]);
        let iters = BTreeMap::from([(j1.job_id.clone(), r(6, 1))]);
        assert_eq!(free_slots(&single, 6, &iters).unwrap(), 4);

        let empty = AggregatorState::new(AggId(1), ClusterId(0));
        assert_eq!(free_slots(&empty, 0, &BTreeMap::new()).unwrap(), 0);
    }

    #[test]
    fn free_slots_reports_overload() {
        let j = job("j", 12, &[7, 6]);
        let (mut agg, _) = agg_with(&[]);
        for t in &j.tasks {
            agg.add_task(t.clone());
        }
        let iters = BTreeMap::from([(j.job_id.clone(), r(12, 1))]);
        assert_eq!(
            free_slots(&agg, 12, &iters),
            Err(ScheduleError::Overloaded { agg: AggId(0), deficit_ms: 1 })
        );
    }

    #[test]
    fn free_slots_requires_estimates() {
        let j1 = job("j1", 6, &[2]);
        let (agg, _) = agg_with(&[&j1]);
        assert!(matches!(
            free_slots(&agg, 6, &BTreeMap::new()),
            Err(ScheduleError::MissingEstimate(_))
        ));
    }

    #[test]
    fn two_job_example_schedule() {
        let j1 = job("j1", 6, &[2]);
        let j2 = job("j2", 12, &[3]);
        let (agg, _) = agg_with(&[&j1, &j2]);
        assert_eq!(agg.cycle_ms, 12);
        let j1_slots: Vec<_> = agg.slot_schedule.iter().filter(|s| s.job_id == j1.job_id).collect();
        let j2_slots: Vec<_> = agg.slot_schedule.iter().filter(|s| s.job_id == j2.job_id).collect();
        assert_eq!(j1_slots.len(), 2);
        assert_eq!(j2_slots.len(), 1);
        assert!(j1_slots.iter().all(|s| s.duration_ms == 2));
        assert_eq!(j2_slots[0].duration_ms, 3);
        assert!(j1_slots[1].start_ms >= 6);
        assert!(slots_well_formed(&agg.slot_schedule, 12));
    }

    #[test]
    fn single_task_fills_cycle() {
        let j = job("j", 5, &[5]);
        let (agg, _) = agg_with(&[&j]);
        assert_eq!(
            agg.slot_schedule,
            vec![Slot { job_id: j.job_id.clone(), task_id: TaskId(0), rep: 0, start_ms: 0, duration_ms: 5 }]
        );
    }

    #[test]
    fn three_unit_tasks_do_not_overlap() {
        let j = job("j", 5, &[1, 1, 1]);
        let (agg, profiles) = agg_with(&[&j]);
        assert_eq!(agg.slot_schedule.len(), 3);
        assert!(slots_well_formed(&agg.slot_schedule, 5));
        assert_eq!(agg.current_free_ms(&profiles).unwrap(), 2);
    }

    #[test]
    fn slots_follow_push_arrival() {
        let j = job("j", 10, &[2, 2]).with_offsets(vec![6, 3]);
        let (agg, _) = agg_with(&[&j]);
        let by_task: BTreeMap<_, _> = agg.slot_schedule.iter().map(|s| (s.task_id, s.start_ms)).collect();
        assert_eq!(by_task[&TaskId(0)], 8);
        assert_eq!(by_task[&TaskId(1)], 6);
    }

    #[test]
    fn infeasible_placement_is_reported() {
        let j1 = job("j1", 4, &[3]);
        let j2 = job("j2", 12, &[3]);
        let (mut agg, mut profiles) = agg_with(&[&j1]);
        for t in &j2.tasks {
            agg.add_task(t.clone());
        }
        profiles.insert(j2.job_id.clone(), j2.clone());
        // 3 x 3 + 3 exactly fills the 12 ms budget; the last J1 repetition has no room.
        assert!(matches!(
            build_slot_schedule(&agg, &profiles),
            Err(ScheduleError::Infeasible { .. })
        ));
    }

    #[test]
    fn phases_pack_identical_jobs_tightly() {
        let jobs: Vec<JobProfile> = (0..3)
            .map(|i| JobProfile::uniform(format!("j{i}"), 1000, 2, 2, &[(150, 1), (150, 1)]))
            .collect();
        let refs: Vec<&JobProfile> = jobs.iter().collect();
        let (agg, _) = agg_with(&refs);
        assert_eq!(agg.placement, Placement::Aligned);
        assert_eq!(agg.slot_schedule.len(), 6);
        assert!(slots_well_formed(&agg.slot_schedule, 1000));
    }

    #[test]
    fn blocked_pushes_fall_back_to_relaxed() {
        let slow = JobProfile::uniform("slow", 1000, 2, 2, &[(600, 1)]);
        let fast = JobProfile::uniform("fast", 390, 2, 2, &[(100, 1)]);
        let (agg, profiles) = agg_with(&[&slow, &fast]);
        assert!(build_slot_schedule(&agg, &profiles).is_err());
        assert_ne!(agg.placement, Placement::Aligned);
        assert_eq!(agg.slot_schedule.len(), 3);
        assert!(slots_well_formed(&agg.slot_schedule, 1000));
    }

    #[test]
    fn latest_fit_respects_cycle_boundary() {
        let tl = Timeline { cycle: 10, busy: vec![(2, 4)] };
        assert_eq!(tl.latest_fit(5, 14, 3), Some(7));
        assert_eq!(tl.latest_fit(8, 14, 3), None);
        assert_eq!(tl.latest_fit(5, 20, 3), Some(17));
        assert_eq!(tl.latest_fit(11, 15, 3), None);
        assert_eq!(tl.latest_fit(0, 2, 2), Some(0));
    }

    #[test]
    fn default_offsets_cover_backward_half() {
        let offs = default_ready_offsets(1000, 4);
        assert_eq!(offs, vec![875, 750, 625, 500]);
        assert!(default_ready_offsets(10, 0).is_empty());
    }

    #[test]
    fn profile_validation() {
        let ok = job("j", 10, &[5, 5]);
        assert!(ok.validate().is_ok());
        let mut bad = ok.clone();
        bad.tensor_ready_offsets_ms = vec![0, 10];
        assert!(bad.validate().is_err());
        let mut heavy = JobProfile::uniform("h", 10, 1, 1, &[(6, 1), (6, 1)]);
        assert!(heavy.validate().is_err());
        heavy.required_servers = 2;
        assert!(heavy.validate().is_ok());
    }

    #[test]
    fn remove_task_drops_empty_job() {
        let j = job("j", 10, &[2]);
        let (mut agg, _) = agg_with(&[&j]);
        assert!(agg.remove_task(&TaskKey::new(j.job_id.clone(), TaskId(0))).is_some());
        assert!(agg.is_empty());
        assert!(agg.assigned.is_empty());
    }
}
