//! Greedy best-fit assignment of aggregation tasks to Aggregators.

use std::collections::{BTreeMap, BTreeSet};

use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::domain::{
    effective_iteration, perf_loss, repetitions, AggId, AggStatus, AggTask, AggregatorState,
    Assignment, JobId, JobProfile, JobRuntime, Ms, Profiles, Rational, TaskKey,
};
use crate::error::{Result, ScheduleError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssignConfig {
    pub loss_limit: f64,
    pub monitor_iterations: u64,
    pub low_perf_threshold: f64,
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig {
            loss_limit: 0.1,
            monitor_iterations: 100,
            low_perf_threshold: 0.9,
        }
    }
}

impl AssignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.loss_limit > 0.0 && self.loss_limit < 1.0) {
            return Err(ScheduleError::InvalidConfig(format!(
                "loss_limit must lie in (0, 1), got {}",
                self.loss_limit
            )));
        }
        if self.monitor_iterations == 0 {
            return Err(ScheduleError::InvalidConfig("monitor_iterations must be at least 1".into()));
        }
        if !(self.low_perf_threshold > 0.0 && self.low_perf_threshold <= 1.0) {
            return Err(ScheduleError::InvalidConfig(format!(
                "low_perf_threshold must lie in (0, 1], got {}",
                self.low_perf_threshold
            )));
        }
        Ok(())
    }

    /// The loss limit as an exact fraction (to a millionth).
    pub fn limit(&self) -> Rational {
        Rational::new((self.loss_limit * 1e6).round() as u64, 1_000_000)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImpactEstimate {
    pub agg_id: AggId,
    pub est_cycle_ms: Ms,
    pub est_iters: BTreeMap<JobId, Rational>,
    /// Losses of the jobs already on the Aggregator.
    pub est_losses: BTreeMap<JobId, Rational>,
    /// Free time per cycle with the candidate task counted; negative means it does not fit.
    pub est_free_ms: i64,
    pub qualified: bool,
}

fn profile<'a>(profiles: &'a Profiles, job: &JobId) -> Result<&'a JobProfile> {
    profiles.get(job).ok_or_else(|| ScheduleError::UnknownJob(job.clone()))
}

/// Effect of placing `task` on `agg`, without mutating anything.
pub fn estimate_impact(
    task: &AggTask,
    owner: &JobProfile,
    agg: &AggregatorState,
    profiles: &Profiles,
    cfg: &AssignConfig,
) -> Result<ImpactEstimate> {
    let mut cycle = owner.iter_duration_ms;
    for job in agg.assigned.keys() {
        cycle = cycle.max(profile(profiles, job)?.iter_duration_ms);
    }
    let limit = cfg.limit();
    let mut est_iters = BTreeMap::new();
    let mut est_losses = BTreeMap::new();
    let mut used: Ms = 0;
    for (job, tasks) in &agg.assigned {
        let p = profile(profiles, job)?;
        let d = effective_iteration(p.iter_duration_ms, cycle)?;
        est_losses.insert(job.clone(), perf_loss(p.iter_duration_ms, d)?);
        est_iters.insert(job.clone(), d);
        used += repetitions(cycle, d) * tasks.iter().map(|t| t.exec_time_ms).sum::<Ms>();
    }
    let owner_d = match est_iters.get(&owner.job_id) {
        Some(d) => *d,
        None => {
            let d = effective_iteration(owner.iter_duration_ms, cycle)?;
            est_iters.insert(owner.job_id.clone(), d);
            d
        }
    };
    used += repetitions(cycle, owner_d) * task.exec_time_ms;
    let qualified = est_losses.values().all(|l| *l < limit);
    Ok(ImpactEstimate {
        agg_id: agg.agg_id,
        est_cycle_ms: cycle,
        est_iters,
        est_losses,
        est_free_ms: cycle as i64 - used as i64,
        qualified,
    })
}

/// Restrictions on where [`assign_task`] may place work.
#[derive(Debug, Clone, Default)]
pub struct AssignScope {
    pub exclude: BTreeSet<AggId>,
    /// When false, a task that fits nowhere yields [`ScheduleError::NoCapacity`].
    pub allow_alloc: bool,
}

impl AssignScope {
    pub fn open() -> Self {
        AssignScope { exclude: BTreeSet::new(), allow_alloc: true }
    }

    pub fn no_alloc() -> Self {
        AssignScope { exclude: BTreeSet::new(), allow_alloc: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placed {
    pub agg_id: AggId,
    pub allocated: bool,
}

/// Supplies an empty active Aggregator, inserting it into the pool if needed.
pub trait Allocate {
    fn allocate(&mut self, aggs: &mut BTreeMap<AggId, AggregatorState>) -> AggId;
}

impl<F: FnMut(&mut BTreeMap<AggId, AggregatorState>) -> AggId> Allocate for F {
    fn allocate(&mut self, aggs: &mut BTreeMap<AggId, AggregatorState>) -> AggId {
        self(aggs)
    }
}

/// Allocator handing out consecutive ids in one cluster, reusing idle empty
/// Aggregators (lowest id first) before creating new ones.
#[derive(Debug, Clone)]
pub struct SequentialAllocator {
    pub next_id: u32,
    pub cluster: crate::domain::ClusterId,
}

impl SequentialAllocator {
    pub fn new(cluster: crate::domain::ClusterId) -> Self {
        SequentialAllocator { next_id: 0, cluster }
    }
}

impl Allocate for SequentialAllocator {
    fn allocate(&mut self, aggs: &mut BTreeMap<AggId, AggregatorState>) -> AggId {
        if let Some(id) = aggs
            .values()
            .find(|a| a.is_empty() && a.status == AggStatus::Active)
            .map(|a| a.agg_id)
        {
            return id;
        }
        while aggs.contains_key(&AggId(self.next_id)) {
            self.next_id += 1;
        }
        let id = AggId(self.next_id);
        self.next_id += 1;
        aggs.insert(id, AggregatorState::new(id, self.cluster));
        id
    }
}

/// Candidate Aggregators in canonical order: active, non-empty, not excluded.
fn candidates(aggs: &BTreeMap<AggId, AggregatorState>, scope: &AssignScope) -> Vec<AggId> {
    aggs.values()
        .filter(|a| a.status == AggStatus::Active && !a.is_empty() && !scope.exclude.contains(&a.agg_id))
        .map(|a| a.agg_id)
        .collect()
}

/// Picks the qualified Aggregator with the least sufficient free time, or
/// `None` when nothing qualifies or fits.
pub fn choose_aggregator(
    task: &AggTask,
    owner: &JobProfile,
    aggs: &BTreeMap<AggId, AggregatorState>,
    profiles: &Profiles,
    cfg: &AssignConfig,
    scope: &AssignScope,
) -> Result<Option<AggId>> {
    let mut best: Option<(i64, AggId)> = None;
    for id in candidates(aggs, scope) {
        let est = estimate_impact(task, owner, &aggs[&id], profiles, cfg)?;
        if !est.qualified || est.est_free_ms < 0 {
            continue;
        }
        if best.is_none_or(|(free, _)| est.est_free_ms < free) {
            best = Some((est.est_free_ms, id));
        }
    }
    Ok(best.map(|(_, id)| id))
}

/// Places one task, allocating a new Aggregator when nothing qualifies.
/// The chosen Aggregator's cycle and schedule are rebuilt.
pub fn assign_task(
    task: &AggTask,
    owner: &JobProfile,
    aggs: &mut BTreeMap<AggId, AggregatorState>,
    profiles: &Profiles,
    cfg: &AssignConfig,
    scope: &AssignScope,
    alloc: &mut dyn Allocate,
) -> Result<Placed> {
    let (agg_id, allocated) = match choose_aggregator(task, owner, aggs, profiles, cfg, scope)? {
        Some(id) => (id, false),
        None if scope.allow_alloc => (alloc.allocate(aggs), true),
        None => {
            return Err(ScheduleError::NoCapacity {
                job: owner.job_id.clone(),
                task: task.task_id,
            })
        }
    };
    aggs.get_mut(&agg_id)
        .ok_or(ScheduleError::UnknownAggregator(agg_id))?
        .add_task(task.clone());
    crate::domain::refresh_in_pool(aggs, agg_id, profiles)?;
    Ok(Placed { agg_id, allocated })
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct JobPlacement {
    pub assignment: Assignment,
    pub allocated: Vec<AggId>,
}

/// Task order used by [`assign_job`]: longest execution first, then task id.
pub fn task_order(job: &JobProfile) -> Vec<&AggTask> {
    let mut tasks: Vec<&AggTask> = job.tasks.iter().collect();
    tasks.sort_by(|a, b| b.exec_time_ms.cmp(&a.exec_time_ms).then(a.task_id.cmp(&b.task_id)));
    tasks
}

/// Assigns every task of `job`. With allocation disabled the pool is left
/// untouched on failure.
pub fn assign_job(
    job: &JobProfile,
    aggs: &mut BTreeMap<AggId, AggregatorState>,
    profiles: &Profiles,
    cfg: &AssignConfig,
    scope: &AssignScope,
    alloc: &mut dyn Allocate,
) -> Result<JobPlacement> {
    let snapshot = (!scope.allow_alloc).then(|| aggs.clone());
    let mut placement = JobPlacement::default();
    for task in task_order(job) {
        match assign_task(task, job, aggs, profiles, cfg, scope, alloc) {
            Ok(p) => {
                placement.assignment.entries.insert(task.key(), p.agg_id);
                if p.allocated {
                    placement.allocated.push(p.agg_id);
                }
            }
            Err(e) => {
                if let Some(s) = snapshot {
                    *aggs = s;
                }
                return Err(e);
            }
        }
    }
    Ok(placement)
}

/// Removes every task of `job` from the pool, rebuilding touched Aggregators.
/// Returns the Aggregators that hosted it.
pub fn remove_job(
    job: &JobId,
    aggs: &mut BTreeMap<AggId, AggregatorState>,
    profiles: &Profiles,
) -> Result<BTreeSet<AggId>> {
    let mut hosts = BTreeSet::new();
    for agg in aggs.values_mut() {
        if agg.hosts_job(job) {
            agg.remove_job(job);
            agg.refresh(profiles)?;
            hosts.insert(agg.agg_id);
        }
    }
    Ok(hosts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feedback {
    Keep,
    Revert,
}

/// Loss measured over a monitoring window; a measured duration below the
/// profile counts as no loss.
pub fn measured_loss(runtime: &JobRuntime, profile: &JobProfile) -> Rational {
    let d = runtime.current_iter_duration_ms;
    if d.is_zero() || d <= Rational::from_integer(profile.iter_duration_ms) {
        return Rational::zero();
    }
    perf_loss(profile.iter_duration_ms, d).unwrap_or_else(|_| Rational::zero())
}

pub fn feedback_check(runtime: &JobRuntime, profile: &JobProfile, cfg: &AssignConfig) -> Result<Feedback> {
    if runtime.iterations_observed < cfg.monitor_iterations {
        return Err(ScheduleError::InsufficientObservations {
            observed: runtime.iterations_observed,
            required: cfg.monitor_iterations,
        });
    }
    Ok(if measured_loss(runtime, profile) >= cfg.limit() {
        Feedback::Revert
    } else {
        Feedback::Keep
    })
}

/// Cyclic-model loss of every job in the pool: a job is as slow as its
/// slowest hosting Aggregator.
pub fn model_losses(
    aggs: &BTreeMap<AggId, AggregatorState>,
    profiles: &Profiles,
) -> Result<BTreeMap<JobId, Rational>> {
    let mut out: BTreeMap<JobId, Rational> = BTreeMap::new();
    for agg in aggs.values() {
        for job in agg.assigned.keys() {
            let p = profile(profiles, job)?;
            let cycle = crate::domain::cycle_of(agg, profiles)?;
            let loss = perf_loss(p.iter_duration_ms, effective_iteration(p.iter_duration_ms, cycle)?)?;
            let e = out.entry(job.clone()).or_insert_with(Rational::zero);
            *e = (*e).max(loss);
        }
    }
    Ok(out)
}

/// Aggregators hosting any task of `job`.
pub fn hosts_of(aggs: &BTreeMap<AggId, AggregatorState>, job: &JobId) -> BTreeSet<AggId> {
    aggs.values().filter(|a| a.hosts_job(job)).map(|a| a.agg_id).collect()
}

pub fn task_host(aggs: &BTreeMap<AggId, AggregatorState>, key: &TaskKey) -> Option<AggId> {
    aggs.values().find(|a| a.hosts_task(key)).map(|a| a.agg_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ClusterId, TaskId};

    fn job(id: &str, d: Ms, execs: &[Ms]) -> JobProfile {
        let tasks: Vec<(Ms, u64)> = execs.iter().map(|&e| (e, 1)).collect();
        let n = tasks.len();
        JobProfile::uniform(id, d, execs.len().max(1) as u32, 2, &tasks).with_offsets(vec![0; n])
    }

    fn pool_with(jobs: &[&JobProfile]) -> (BTreeMap<AggId, AggregatorState>, Profiles) {
        let mut aggs = BTreeMap::new();
        let mut profiles = Profiles::new();
        let mut agg = AggregatorState::new(AggId(0), ClusterId(0));
        for j in jobs {
            profiles.insert(j.job_id.clone(), (*j).clone());
            for t in &j.tasks {
                agg.add_task(t.clone());
            }
        }
        agg.refresh(&profiles).unwrap();
        aggs.insert(AggId(0), agg);
        (aggs, profiles)
    }

    #[test]
    fn estimate_on_two_job_example() {
        let j1 = job("j1", 6, &[2]);
        let owner = job("j2", 12, &[3]);
        let (aggs, mut profiles) = pool_with(&[&j1]);
        profiles.insert(owner.job_id.clone(), owner.clone());
        let est = estimate_impact(&owner.tasks[0], &owner, &aggs[&AggId(0)], &profiles, &AssignConfig::default()).unwrap();
        assert_eq!(est.est_cycle_ms, 12);
        assert_eq!(est.est_losses[&j1.job_id], Rational::zero());
        assert_eq!(est.est_free_ms, 5);
        assert!(est.qualified);
    }

    #[test]
    fn estimate_rejects_seventeen_percent_loss() {
        let j = job("j", 5, &[1]);
        let owner = job("k", 12, &[3]);
        let (aggs, mut profiles) = pool_with(&[&j]);
        profiles.insert(owner.job_id.clone(), owner.clone());
        let est = estimate_impact(&owner.tasks[0], &owner, &aggs[&AggId(0)], &profiles, &AssignConfig::default()).unwrap();
        assert_eq!(est.est_iters[&j.job_id], Rational::from_integer(6));
        assert_eq!(est.est_losses[&j.job_id], Rational::new(1, 6));
        assert!(!est.qualified);
    }

    #[test]
    fn estimate_on_empty_aggregator() {
        let owner = job("k", 12, &[3]);
        let profiles = Profiles::from([(owner.job_id.clone(), owner.clone())]);
        let empty = AggregatorState::new(AggId(3), ClusterId(0));
        let est = estimate_impact(&owner.tasks[0], &owner, &empty, &profiles, &AssignConfig::default()).unwrap();
        assert_eq!(est.est_cycle_ms, 12);
        assert!(est.est_losses.is_empty());
        assert!(est.qualified);
        assert_eq!(est.est_free_ms, 9);
    }

    #[test]
    fn best_fit_picks_least_sufficient_free() {
        let a = job("a", 10, &[5]);
        let b = job("b", 10, &[1]);
        let owner = job("k", 10, &[4]);
        let mut profiles = Profiles::new();
        let mut aggs = BTreeMap::new();
        for (i, j) in [&b, &a].iter().enumerate() {
            profiles.insert(j.job_id.clone(), (*j).clone());
            let mut agg = AggregatorState::new(AggId(i as u32), ClusterId(0));
            agg.add_task(j.tasks[0].clone());
            aggs.insert(agg.agg_id, agg);
        }
        profiles.insert(owner.job_id.clone(), owner.clone());
        for agg in aggs.values_mut() {
            agg.refresh(&profiles).unwrap();
        }
        // agg0 has 9 free, agg1 has 5 free
        let mut alloc = SequentialAllocator::new(ClusterId(0));
        let placed = assign_task(&owner.tasks[0], &owner, &mut aggs, &profiles, &AssignConfig::default(), &AssignScope::open(), &mut alloc).unwrap();
        assert_eq!(placed, Placed { agg_id: AggId(1), allocated: false });
    }

    #[test]
    fn unqualified_pool_allocates() {
        let j = job("j", 5, &[1]);
        let owner = job("k", 12, &[3]);
        let (mut aggs, mut profiles) = pool_with(&[&j]);
        profiles.insert(owner.job_id.clone(), owner.clone());
        let mut alloc = SequentialAllocator::new(ClusterId(0));
        let placed = assign_task(&owner.tasks[0], &owner, &mut aggs, &profiles, &AssignConfig::default(), &AssignScope::open(), &mut alloc).unwrap();
        assert_eq!(placed, Placed { agg_id: AggId(1), allocated: true });
        let err = assign_task(&owner.tasks[0], &owner, &mut pool_with(&[&j]).0, &profiles, &AssignConfig::default(), &AssignScope::no_alloc(), &mut alloc);
        assert!(matches!(err, Err(ScheduleError::NoCapacity { .. })));
    }

    #[test]
    fn four_identical_jobs_share_two_aggregators() {
        let jobs: Vec<JobProfile> = (0..4)
            .map(|i| JobProfile::uniform(format!("vgg{i}"), 1000, 2, 2, &[(150, 1), (150, 1)]))
            .collect();
        let profiles: Profiles = jobs.iter().map(|j| (j.job_id.clone(), j.clone())).collect();
        let mut aggs = BTreeMap::new();
        let mut alloc = SequentialAllocator::new(ClusterId(0));
        for j in &jobs {
            assign_job(j, &mut aggs, &profiles, &AssignConfig::default(), &AssignScope::open(), &mut alloc).unwrap();
        }
        assert_eq!(aggs.len(), 2);
        let busy: Ms = aggs.values().flat_map(|a| &a.slot_schedule).map(|s| s.duration_ms).sum();
        assert_eq!(busy, 1200);
    }

    #[test]
    fn oversized_job_allocates() {
        let j = job("j", 10, &[8]);
        let big = job("big", 10, &[3, 3]);
        let (mut aggs, mut profiles) = pool_with(&[&j]);
        profiles.insert(big.job_id.clone(), big.clone());
        let mut alloc = SequentialAllocator::new(ClusterId(0));
        let placement = assign_job(&big, &mut aggs, &profiles, &AssignConfig::default(), &AssignScope::open(), &mut alloc).unwrap();
        assert_eq!(placement.allocated, vec![AggId(1)]);
        assert_eq!(placement.assignment.entries.len(), 2);
    }

    #[test]
    fn failed_no_alloc_job_rolls_back() {
        let j = job("j", 10, &[6]);
        let big = job("big", 10, &[3, 3]);
        let (mut aggs, mut profiles) = pool_with(&[&j]);
        profiles.insert(big.job_id.clone(), big.clone());
        let before = aggs.clone();
        let mut alloc = SequentialAllocator::new(ClusterId(0));
        assert!(assign_job(&big, &mut aggs, &profiles, &AssignConfig::default(), &AssignScope::no_alloc(), &mut alloc).is_err());
        assert_eq!(aggs, before);
    }

    #[test]
    fn feedback_examples() {
        let p = JobProfile::uniform("j", 1000, 2, 2, &[(100, 1)]);
        let cfg = AssignConfig::default();
        let rt = |d: u64| JobRuntime::new(p.job_id.clone(), Rational::from_integer(d), 100);
        assert_eq!(feedback_check(&rt(1100), &p, &cfg).unwrap(), Feedback::Keep);
        assert_eq!(feedback_check(&rt(1282), &p, &cfg).unwrap(), Feedback::Revert);
        assert_eq!(feedback_check(&rt(1000), &p, &cfg).unwrap(), Feedback::Keep);
        let early = JobRuntime::new(p.job_id.clone(), Rational::from_integer(1000), 3);
        assert!(matches!(
            feedback_check(&early, &p, &cfg),
            Err(ScheduleError::InsufficientObservations { observed: 3, required: 100 })
        ));
    }

    #[test]
    fn task_order_is_descending_exec() {
        let j = job("j", 10, &[2, 5, 5, 1]);
        let ids: Vec<TaskId> = task_order(&j).iter().map(|t| t.task_id).collect();
        assert_eq!(ids, vec![TaskId(1), TaskId(2), TaskId(0), TaskId(3)]);
    }

    #[test]
    fn config_validation() {
        assert!(AssignConfig::default().validate().is_ok());
        let bad = AssignConfig { loss_limit: 1.0, ..AssignConfig::default() };
        assert!(bad.validate().is_err());
        let bad = AssignConfig { monitor_iterations: 0, ..AssignConfig::default() };
        assert!(bad.validate().is_err());
    }
}
