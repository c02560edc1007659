//! Elastic Aggregator management: clusters, arrival and exit handling,
//! recycling of light-loaded Aggregators, and periodic rescaling.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::assignment::{
    assign_job, assign_task, hosts_of, model_losses, task_order, AssignConfig, AssignScope,
    Allocate, JobPlacement,
};
use crate::domain::{
    AggId, AggStatus, AggTask, AggregatorState, ClusterId, JobId, JobProfile, Ms, Profiles,
    TaskKey,
};
use crate::error::{Result, ScheduleError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalingConfig {
    pub scaling_period_s: u64,
    /// Blocked allocation requests in a period that unlock immediate allocation.
    pub ondemand_threshold: u32,
    pub max_aggs_per_cluster: u32,
    pub headroom: f64,
    pub clusters_initial: u32,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            scaling_period_s: 300,
            ondemand_threshold: 1,
            max_aggs_per_cluster: 64,
            headroom: 1.1,
            clusters_initial: 1,
        }
    }
}

impl ScalingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scaling_period_s == 0 {
            return Err(ScheduleError::InvalidConfig("scaling_period_s must be positive".into()));
        }
        if self.max_aggs_per_cluster == 0 || self.clusters_initial == 0 {
            return Err(ScheduleError::InvalidConfig(
                "max_aggs_per_cluster and clusters_initial must be positive".into(),
            ));
        }
        if self.headroom < 1.0 {
            return Err(ScheduleError::InvalidConfig("headroom must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    AllocAgg,
    ReleaseAgg,
    AllocCluster,
    ReleaseCluster,
    Recycle,
    Revert,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScalingAction {
    pub action: ActionKind,
    pub cluster: ClusterId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agg: Option<AggId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub job: Option<JobId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterState {
    pub cluster_id: ClusterId,
    pub aggregators: BTreeMap<AggId, AggregatorState>,
    pub jobs_served: BTreeSet<JobId>,
}

impl ClusterState {
    pub fn new(cluster_id: ClusterId) -> Self {
        ClusterState { cluster_id, aggregators: BTreeMap::new(), jobs_served: BTreeSet::new() }
    }

    /// Free CPU normalized to ms per second: partially used Aggregators
    /// contribute their free share of each cycle, idle ones a full second.
    pub fn free_cpu_ms_per_s(&self, profiles: &Profiles) -> Result<Ms> {
        let mut free = 0;
        for agg in self.aggregators.values().filter(|a| a.status == AggStatus::Active) {
            if agg.is_empty() {
                free += 1000;
            } else {
                free += agg.current_free_ms(profiles)? * 1000 / agg.cycle_ms;
            }
        }
        Ok(free)
    }

    pub fn active_count(&self) -> usize {
        self.aggregators.values().filter(|a| a.status != AggStatus::Released).count()
    }

    pub fn busy_count(&self) -> usize {
        self.aggregators.values().filter(|a| !a.is_empty()).count()
    }

    pub fn idle_reserve(&self) -> Vec<AggId> {
        self.aggregators
            .values()
            .filter(|a| a.is_empty() && a.status == AggStatus::Active)
            .map(|a| a.agg_id)
            .collect()
    }
}

/// CPU demand of a job in ms per second.
pub fn job_demand_ms_per_s(job: &JobProfile) -> Ms {
    (job.total_exec_ms() * 1000).div_ceil(job.iter_duration_ms)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClusterSummary {
    pub cluster_id: ClusterId,
    pub free_cpu_ms: Ms,
    pub aggregators: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterChoice {
    Fits(ClusterId),
    /// Nothing has enough free CPU; this cluster has the most and will grow.
    Grow(ClusterId),
    NewCluster,
}

/// Best-fit cluster: sufficient but least free CPU, ties by id.
pub fn select_cluster(demand_ms: Ms, clusters: &[ClusterSummary], max_aggs: u32) -> ClusterChoice {
    if let Some(c) = clusters
        .iter()
        .filter(|c| c.free_cpu_ms >= demand_ms)
        .min_by_key(|c| (c.free_cpu_ms, c.cluster_id))
    {
        return ClusterChoice::Fits(c.cluster_id);
    }
    match clusters
        .iter()
        .filter(|c| c.aggregators < max_aggs)
        .max_by_key(|c| (c.free_cpu_ms, std::cmp::Reverse(c.cluster_id)))
    {
        Some(c) => ClusterChoice::Grow(c.cluster_id),
        None => ClusterChoice::NewCluster,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecycleOutcome {
    /// Aggregators emptied by the recycle, in order.
    pub drained: Vec<AggId>,
    pub moves: Vec<(TaskKey, AggId, AggId)>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExitOutcome {
    pub emptied: Vec<AggId>,
    pub recycle: RecycleOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arrival {
    pub cluster: ClusterId,
    pub placement: JobPlacement,
}

/// Scheduler view of every cluster plus the scaling action log.
#[derive(Debug, Clone)]
pub struct Service {
    pub clusters: BTreeMap<ClusterId, ClusterState>,
    pub cfg: ScalingConfig,
    pub log: Vec<ScalingAction>,
    next_agg: u32,
    next_cluster: u32,
}

struct ClusterAlloc<'a> {
    next_agg: &'a mut u32,
    cluster: ClusterId,
    log: &'a mut Vec<ScalingAction>,
    job: Option<JobId>,
}

impl Allocate for ClusterAlloc<'_> {
    fn allocate(&mut self, aggs: &mut BTreeMap<AggId, AggregatorState>) -> AggId {
        if let Some(a) = aggs.values().find(|a| a.is_empty() && a.status == AggStatus::Active) {
            return a.agg_id;
        }
        let id = AggId(*self.next_agg);
        *self.next_agg += 1;
        aggs.insert(id, AggregatorState::new(id, self.cluster));
        self.log.push(ScalingAction {
            action: ActionKind::AllocAgg,
            cluster: self.cluster,
            agg: Some(id),
            job: self.job.clone(),
        });
        id
    }
}

impl Service {
    pub fn new(cfg: ScalingConfig) -> Self {
        let mut s = Service { clusters: BTreeMap::new(), cfg, log: Vec::new(), next_agg: 0, next_cluster: 0 };
        for _ in 0..s.cfg.clusters_initial.max(1) {
            s.add_cluster();
        }
        s
    }

    fn add_cluster(&mut self) -> ClusterId {
        let id = ClusterId(self.next_cluster);
        self.next_cluster += 1;
        self.clusters.insert(id, ClusterState::new(id));
        self.log.push(ScalingAction { action: ActionKind::AllocCluster, cluster: id, agg: None, job: None });
        id
    }

    pub fn cluster_of_job(&self, job: &JobId) -> Option<ClusterId> {
        self.clusters.values().find(|c| c.jobs_served.contains(job)).map(|c| c.cluster_id)
    }

    pub fn cluster_of_agg(&self, agg: AggId) -> Option<ClusterId> {
        self.clusters.values().find(|c| c.aggregators.contains_key(&agg)).map(|c| c.cluster_id)
    }

    pub fn agg(&self, id: AggId) -> Option<&AggregatorState> {
        self.clusters.values().find_map(|c| c.aggregators.get(&id))
    }

    pub fn aggs(&self) -> impl Iterator<Item = &AggregatorState> {
        self.clusters.values().flat_map(|c| c.aggregators.values())
    }

    /// Aggregators currently held (busy, idle reserve or draining).
    pub fn allocated_count(&self) -> usize {
        self.clusters.values().map(ClusterState::active_count).sum()
    }

    pub fn busy_count(&self) -> usize {
        self.clusters.values().map(ClusterState::busy_count).sum()
    }

    pub fn job_hosts(&self, job: &JobId) -> BTreeSet<AggId> {
        self.cluster_of_job(job)
            .map(|c| hosts_of(&self.clusters[&c].aggregators, job))
            .unwrap_or_default()
    }

    /// Cycle-model loss of each job.
    pub fn losses(&self, profiles: &Profiles) -> Result<BTreeMap<JobId, crate::domain::Rational>> {
        let mut out = BTreeMap::new();
        for c in self.clusters.values() {
            out.extend(model_losses(&c.aggregators, profiles)?);
        }
        Ok(out)
    }

    pub fn summaries(&self, profiles: &Profiles) -> Result<Vec<ClusterSummary>> {
        self.clusters
            .values()
            .map(|c| {
                Ok(ClusterSummary {
                    cluster_id: c.cluster_id,
                    free_cpu_ms: c.free_cpu_ms_per_s(profiles)?,
                    aggregators: c.active_count() as u32,
                })
            })
            .collect()
    }

    /// Picks a cluster and runs the assignment scheme there.
    pub fn place_job(&mut self, job: &JobProfile, profiles: &Profiles, cfg: &AssignConfig) -> Result<Arrival> {
        let summaries = self.summaries(profiles)?;
        let cluster = match select_cluster(job_demand_ms_per_s(job), &summaries, self.cfg.max_aggs_per_cluster) {
            ClusterChoice::Fits(c) | ClusterChoice::Grow(c) => c,
            ClusterChoice::NewCluster => self.add_cluster(),
        };
        let placement = self.assign_in(cluster, job, profiles, cfg, &AssignScope::open(), None)?;
        self.clusters.get_mut(&cluster).expect("cluster").jobs_served.insert(job.job_id.clone());
        Ok(Arrival { cluster, placement })
    }

    fn assign_in(
        &mut self,
        cluster: ClusterId,
        job: &JobProfile,
        profiles: &Profiles,
        cfg: &AssignConfig,
        scope: &AssignScope,
        tag: Option<JobId>,
    ) -> Result<JobPlacement> {
        let c = self.clusters.get_mut(&cluster).expect("cluster");
        let mut alloc = ClusterAlloc {
            next_agg: &mut self.next_agg,
            cluster,
            log: &mut self.log,
            job: tag.or_else(|| Some(job.job_id.clone())),
        };
        assign_job(job, &mut c.aggregators, profiles, cfg, scope, &mut alloc)
    }

    /// Adds one Aggregator and reassigns the entire job, avoiding `blacklist`.
    pub fn revert_job(
        &mut self,
        job: &JobProfile,
        blacklist: &BTreeSet<AggId>,
        profiles: &Profiles,
        cfg: &AssignConfig,
    ) -> Result<JobPlacement> {
        let cluster = self
            .cluster_of_job(&job.job_id)
            .ok_or_else(|| ScheduleError::UnknownJob(job.job_id.clone()))?;
        self.log.push(ScalingAction {
            action: ActionKind::Revert,
            cluster,
            agg: None,
            job: Some(job.job_id.clone()),
        });
        let c = self.clusters.get_mut(&cluster).expect("cluster");
        if c.idle_reserve().is_empty() {
            let mut alloc = ClusterAlloc {
                next_agg: &mut self.next_agg,
                cluster,
                log: &mut self.log,
                job: Some(job.job_id.clone()),
            };
            alloc.allocate(&mut c.aggregators);
        }
        self.reassign_job(job, blacklist, profiles, cfg)
    }

    /// Removes the job from its Aggregators and assigns it again, avoiding
    /// `exclude` and allocating as needed.
    pub fn reassign_job(
        &mut self,
        job: &JobProfile,
        exclude: &BTreeSet<AggId>,
        profiles: &Profiles,
        cfg: &AssignConfig,
    ) -> Result<JobPlacement> {
        let cluster = self
            .cluster_of_job(&job.job_id)
            .ok_or_else(|| ScheduleError::UnknownJob(job.job_id.clone()))?;
        let c = self.clusters.get_mut(&cluster).expect("cluster");
        crate::assignment::remove_job(&job.job_id, &mut c.aggregators, profiles)?;
        let scope = AssignScope { exclude: exclude.clone(), allow_alloc: true };
        self.assign_in(cluster, job, profiles, cfg, &scope, None)
    }

    /// Places a job on the given Aggregators (one per task, in task order),
    /// creating them in the first cluster when missing.
    pub fn place_fixed(&mut self, job: &JobProfile, hosts: &[AggId], profiles: &Profiles) -> Result<Arrival> {
        let cluster = *self.clusters.keys().next().expect("at least one cluster");
        let c = self.clusters.get_mut(&cluster).expect("cluster");
        let mut assignment = crate::domain::Assignment::default();
        let mut allocated = Vec::new();
        for (task, &agg) in job.tasks.iter().zip(hosts) {
            if !c.aggregators.contains_key(&agg) {
                c.aggregators.insert(agg, AggregatorState::new(agg, cluster));
                self.next_agg = self.next_agg.max(agg.0 + 1);
                self.log.push(ScalingAction { action: ActionKind::AllocAgg, cluster, agg: Some(agg), job: Some(job.job_id.clone()) });
                allocated.push(agg);
            }
            let a = c.aggregators.get_mut(&agg).expect("aggregator");
            a.add_task(task.clone());
            assignment.entries.insert(task.key(), agg);
        }
        for agg in assignment.aggregators() {
            crate::domain::refresh_in_pool(&mut c.aggregators, agg, profiles)?;
        }
        c.jobs_served.insert(job.job_id.clone());
        Ok(Arrival { cluster, placement: JobPlacement { assignment, allocated } })
    }

    /// Moves every task of `job` hosted on `from` elsewhere in its cluster,
    /// never onto `from` or a `pinned` Aggregator. All or nothing: returns
    /// `None` and leaves the pool untouched when some task cannot move.
    pub fn move_tasks_off(
        &mut self,
        job: &JobProfile,
        from: AggId,
        allow_alloc: bool,
        profiles: &Profiles,
        cfg: &AssignConfig,
        pinned: &dyn Fn(AggId) -> bool,
    ) -> Result<Option<Vec<(TaskKey, AggId)>>> {
        let Some(cluster) = self.cluster_of_job(&job.job_id) else {
            return Ok(None);
        };
        let c = self.clusters.get_mut(&cluster).expect("cluster");
        let Some(src) = c.aggregators.get(&from) else {
            return Ok(None);
        };
        let tasks: Vec<AggTask> = src.assigned.get(&job.job_id).cloned().unwrap_or_default();
        if tasks.is_empty() {
            return Ok(None);
        }
        let snapshot = c.aggregators.clone();
        let log_len = self.log.len();
        let next = self.next_agg;
        let mut scope = AssignScope { exclude: BTreeSet::from([from]), allow_alloc };
        scope.exclude.extend(c.aggregators.keys().copied().filter(|a| pinned(*a)));
        let subset = JobProfile { tasks: tasks.clone(), ..job.clone() };
        let mut moves = Vec::new();
        for t in task_order(&subset) {
            c.aggregators.get_mut(&from).expect("source").remove_task(&t.key());
            let mut alloc = ClusterAlloc {
                next_agg: &mut self.next_agg,
                cluster,
                log: &mut self.log,
                job: Some(job.job_id.clone()),
            };
            match assign_task(t, job, &mut c.aggregators, profiles, cfg, &scope, &mut alloc) {
                Ok(p) => moves.push((t.key(), p.agg_id)),
                Err(ScheduleError::NoCapacity { .. }) => {
                    c.aggregators = snapshot;
                    self.log.truncate(log_len);
                    self.next_agg = next;
                    return Ok(None);
                }
                Err(e) => return Err(e),
            }
        }
        c.aggregators.get_mut(&from).expect("source").refresh(profiles)?;
        Ok(Some(moves))
    }

    /// Arrival followed by the revert loop, using the cycle-model loss in
    /// place of a measured one. At most `required_servers` reverts are made.
    /// Returns the number of reverts.
    pub fn arrive_with_model_feedback(
        &mut self,
        job: &JobProfile,
        profiles: &Profiles,
        cfg: &AssignConfig,
    ) -> Result<(Arrival, u32)> {
        let mut arrival = self.place_job(job, profiles, cfg)?;
        let mut blacklist = BTreeSet::new();
        let mut reverts = 0;
        loop {
            let loss = self.losses(profiles)?.get(&job.job_id).copied().unwrap_or_default();
            if loss < cfg.limit() || reverts >= job.required_servers {
                return Ok((arrival, reverts));
            }
            blacklist.extend(self.job_hosts(&job.job_id));
            arrival.placement = self.revert_job(job, &blacklist, profiles, cfg)?;
            reverts += 1;
        }
    }

    /// Removes a finished job, reports Aggregators it left empty, then tries
    /// to recycle light-loaded ones. `pinned` marks Aggregators that must not
    /// be drained (for example because a migration touches them).
    pub fn exit_job(
        &mut self,
        job: &JobId,
        profiles: &Profiles,
        cfg: &AssignConfig,
        pinned: &dyn Fn(AggId) -> bool,
    ) -> Result<ExitOutcome> {
        let Some(cluster) = self.cluster_of_job(job) else {
            return Ok(ExitOutcome::default());
        };
        let c = self.clusters.get_mut(&cluster).expect("cluster");
        c.jobs_served.remove(job);
        let hosts = crate::assignment::remove_job(job, &mut c.aggregators, profiles)?;
        let emptied: Vec<AggId> = hosts.into_iter().filter(|a| c.aggregators[a].is_empty()).collect();
        let recycle = self.recycle_least_loaded(cluster, profiles, cfg, pinned)?;
        Ok(ExitOutcome { emptied, recycle })
    }

    /// Drains the least-loaded Aggregators into the others without new
    /// allocations, stopping at the first that cannot be drained.
    pub fn recycle_least_loaded(
        &mut self,
        cluster: ClusterId,
        profiles: &Profiles,
        cfg: &AssignConfig,
        pinned: &dyn Fn(AggId) -> bool,
    ) -> Result<RecycleOutcome> {
        let mut out = RecycleOutcome::default();
        let limit = cfg.limit();
        loop {
            let c = self.clusters.get_mut(&cluster).expect("cluster");
            let mut busy: Vec<(f64, AggId)> = c
                .aggregators
                .values()
                .filter(|a| a.status == AggStatus::Active && !a.is_empty())
                .map(|a| (a.load(), a.agg_id))
                .collect();
            if busy.len() < 2 {
                return Ok(out);
            }
            busy.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let victim = busy[0].1;
            if pinned(victim) {
                return Ok(out);
            }
            let before = model_losses(&c.aggregators, profiles)?;
            let snapshot = c.aggregators.clone();
            let tasks: Vec<AggTask> = c.aggregators[&victim].assigned.values().flatten().cloned().collect();
            let mut moves = Vec::new();
            let ok = drain(victim, tasks, &mut c.aggregators, profiles, cfg, &mut moves, &pinned)?;
            let regress = ok && {
                let after = model_losses(&c.aggregators, profiles)?;
                after.iter().any(|(j, l)| *l >= limit && before.get(j).is_none_or(|b| l > b))
            };
            if !ok || regress {
                c.aggregators = snapshot;
                return Ok(out);
            }
            self.log.push(ScalingAction { action: ActionKind::Recycle, cluster, agg: Some(victim), job: None });
            out.drained.push(victim);
            out.moves.extend(moves);
        }
    }

    /// Marks an Aggregator released and drops it from its cluster.
    pub fn release(&mut self, agg: AggId) -> bool {
        let Some(cluster) = self.cluster_of_agg(agg) else {
            return false;
        };
        let c = self.clusters.get_mut(&cluster).expect("cluster");
        if !c.aggregators[&agg].is_empty() {
            return false;
        }
        c.aggregators.remove(&agg);
        self.log.push(ScalingAction { action: ActionKind::ReleaseAgg, cluster, agg: Some(agg), job: None });
        true
    }

    pub fn set_status(&mut self, agg: AggId, status: AggStatus) {
        if let Some(c) = self.cluster_of_agg(agg) {
            if let Some(a) = self.clusters.get_mut(&c).and_then(|c| c.aggregators.get_mut(&agg)) {
                a.status = status;
            }
        }
    }

    /// Adds an idle Aggregator to `cluster`.
    pub fn provision(&mut self, cluster: ClusterId) -> AggId {
        let id = AggId(self.next_agg);
        self.next_agg += 1;
        self.clusters
            .get_mut(&cluster)
            .expect("cluster")
            .aggregators
            .insert(id, AggregatorState::new(id, cluster));
        self.log.push(ScalingAction { action: ActionKind::AllocAgg, cluster, agg: Some(id), job: None });
        id
    }

    /// Periodic adjustment: each cluster keeps `ceil(peak busy * headroom)`
    /// Aggregators; surplus idle ones are released, deficits provisioned.
    /// Clusters without jobs are removed down to one.
    pub fn periodic_rescale(&mut self, peak_busy: &BTreeMap<ClusterId, usize>) -> Vec<ScalingAction> {
        let start = self.log.len();
        let ids: Vec<ClusterId> = self.clusters.keys().copied().collect();
        for id in ids {
            let peak = peak_busy.get(&id).copied().unwrap_or(0);
            let target = (peak as f64 * self.cfg.headroom).ceil() as usize;
            let c = &self.clusters[&id];
            let held = c.active_count();
            if held < target {
                for _ in held..target.min(self.cfg.max_aggs_per_cluster as usize) {
                    self.provision(id);
                }
            } else {
                let surplus = held - target;
                let mut idle = c.idle_reserve();
                idle.reverse();
                for agg in idle.into_iter().take(surplus) {
                    self.release(agg);
                }
            }
        }
        let empty: Vec<ClusterId> = self
            .clusters
            .values()
            .filter(|c| c.jobs_served.is_empty() && c.busy_count() == 0)
            .map(|c| c.cluster_id)
            .collect();
        let mut remaining = self.clusters.len();
        for id in empty.into_iter().rev() {
            if remaining <= 1 {
                break;
            }
            let idle = self.clusters[&id].idle_reserve();
            for agg in idle {
                self.release(agg);
            }
            if self.clusters[&id].aggregators.is_empty() {
                self.clusters.remove(&id);
                self.log.push(ScalingAction { action: ActionKind::ReleaseCluster, cluster: id, agg: None, job: None });
                remaining -= 1;
            }
        }
        self.log[start..].to_vec()
    }
}

fn drain(
    victim: AggId,
    tasks: Vec<AggTask>,
    aggs: &mut BTreeMap<AggId, AggregatorState>,
    profiles: &Profiles,
    cfg: &AssignConfig,
    moves: &mut Vec<(TaskKey, AggId, AggId)>,
    pinned: &dyn Fn(AggId) -> bool,
) -> Result<bool> {
    let mut scope = AssignScope::no_alloc();
    scope.exclude.insert(victim);
    scope.exclude.extend(aggs.keys().copied().filter(|a| pinned(*a)));
    let mut by_job: BTreeMap<JobId, Vec<AggTask>> = BTreeMap::new();
    for t in tasks {
        by_job.entry(t.job_id.clone()).or_default().push(t);
    }
    for (job, tasks) in by_job {
        let owner = profiles.get(&job).ok_or_else(|| ScheduleError::UnknownJob(job.clone()))?;
        let subset = JobProfile { tasks: tasks.clone(), ..owner.clone() };
        for t in task_order(&subset) {
            aggs.get_mut(&victim).expect("victim").remove_task(&t.key());
            let mut never = |_: &mut BTreeMap<AggId, AggregatorState>| -> AggId { unreachable!("allocation disabled") };
            match assign_task(t, owner, aggs, profiles, cfg, &scope, &mut never) {
                Ok(p) => moves.push((t.key(), victim, p.agg_id)),
                Err(ScheduleError::NoCapacity { .. }) => return Ok(false),
                Err(e) => return Err(e),
            }
        }
    }
    aggs.get_mut(&victim).expect("victim").refresh(profiles)?;
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> AssignConfig {
        AssignConfig::default()
    }

    fn profiles_of(jobs: &[&JobProfile]) -> Profiles {
        jobs.iter().map(|j| (j.job_id.clone(), (*j).clone())).collect()
    }

    #[test]
    fn best_fit_cluster() {
        let s = |id, free| ClusterSummary { cluster_id: ClusterId(id), free_cpu_ms: free, aggregators: 1 };
        let cs = [s(0, 5000), s(1, 1200), s(2, 3000)];
        assert_eq!(select_cluster(1000, &cs, 8), ClusterChoice::Fits(ClusterId(1)));
        assert_eq!(select_cluster(1000, &cs[..1], 8), ClusterChoice::Fits(ClusterId(0)));
        assert_eq!(select_cluster(9000, &cs, 8), ClusterChoice::Grow(ClusterId(0)));
        assert_eq!(select_cluster(9000, &cs, 1), ClusterChoice::NewCluster);
    }

    #[test]
    fn case_study_revert_then_release() {
        let vgg = JobProfile::uniform("vgg", 1000, 2, 2, &[(600, 1), (600, 1)]);
        let alex = JobProfile::uniform("alex", 390, 2, 2, &[(100, 1), (100, 1)]);
        let profiles = profiles_of(&[&vgg, &alex]);
        let mut svc = Service::new(ScalingConfig::default());
        svc.arrive_with_model_feedback(&vgg, &profiles, &cfg()).unwrap();
        assert_eq!(svc.allocated_count(), 2);
        let (arrival, reverts) = svc.arrive_with_model_feedback(&alex, &profiles, &cfg()).unwrap();
        assert_eq!(reverts, 1);
        assert_eq!(svc.allocated_count(), 3);
        let hosts = svc.job_hosts(&alex.job_id);
        assert_eq!(hosts.len(), 1);
        assert!(arrival.placement.assignment.aggregators().is_subset(&hosts));
        assert!(svc.losses(&profiles).unwrap().values().all(|l| *l < cfg().limit()));
        let out = svc.exit_job(&alex.job_id, &profiles, &cfg(), &|_| false).unwrap();
        assert_eq!(out.emptied, hosts.into_iter().collect::<Vec<_>>());
        assert!(out.recycle.drained.is_empty());
    }

    #[test]
    fn fitting_job_needs_no_allocation() {
        let a = JobProfile::uniform("a", 1000, 2, 2, &[(300, 1)]);
        let b = JobProfile::uniform("b", 1000, 2, 2, &[(200, 1), (200, 1)]);
        let profiles = profiles_of(&[&a, &b]);
        let mut svc = Service::new(ScalingConfig::default());
        svc.place_job(&a, &profiles, &cfg()).unwrap();
        let arrival = svc.place_job(&b, &profiles, &cfg()).unwrap();
        assert!(arrival.placement.allocated.is_empty());
    }

    #[test]
    fn recycle_drains_lighter_aggregator() {
        let a = JobProfile::uniform("a", 1000, 1, 2, &[(200, 1)]);
        let b = JobProfile::uniform("b", 1000, 1, 2, &[(300, 1)]);
        let filler = JobProfile::uniform("f", 1000, 1, 2, &[(700, 1)]);
        let profiles = profiles_of(&[&a, &b, &filler]);
        let mut svc = Service::new(ScalingConfig::default());
        svc.place_job(&a, &profiles, &cfg()).unwrap();
        svc.place_job(&filler, &profiles, &cfg()).unwrap();
        svc.place_job(&b, &profiles, &cfg()).unwrap();
        // a+f share agg0 (900), b sits alone on agg1 (300).
        assert_eq!(svc.allocated_count(), 2);
        let out = svc.exit_job(&filler.job_id, &profiles, &cfg(), &|_| false).unwrap();
        assert_eq!(out.recycle.drained, vec![AggId(0)]);
        assert_eq!(out.emptied, Vec::<AggId>::new());
        assert_eq!(svc.busy_count(), 1);
        let placements = crate::oracle::pool_placements(&svc.clusters[&ClusterId(0)].aggregators);
        assert!(crate::oracle::validate_assignment(&placements, &[a.clone(), b.clone()]).is_valid());
    }

    #[test]
    fn recycle_rolls_back_on_loss() {
        let slow = JobProfile::uniform("slow", 1200, 1, 2, &[(300, 1)]);
        let fast = JobProfile::uniform("fast", 700, 1, 2, &[(100, 1)]);
        let profiles = profiles_of(&[&slow, &fast]);
        let mut svc = Service::new(ScalingConfig::default());
        svc.place_job(&slow, &profiles, &cfg()).unwrap();
        svc.place_job(&fast, &profiles, &cfg()).unwrap();
        let before = svc.clusters.clone();
        let out = svc.recycle_least_loaded(ClusterId(0), &profiles, &cfg(), &|_| false).unwrap();
        assert!(out.drained.is_empty());
        assert_eq!(svc.clusters, before);
    }

    #[test]
    fn single_aggregator_is_not_recycled() {
        let a = JobProfile::uniform("a", 1000, 1, 2, &[(200, 1)]);
        let profiles = profiles_of(&[&a]);
        let mut svc = Service::new(ScalingConfig::default());
        svc.place_job(&a, &profiles, &cfg()).unwrap();
        let out = svc.recycle_least_loaded(ClusterId(0), &profiles, &cfg(), &|_| false).unwrap();
        assert!(out.drained.is_empty());
    }

    #[test]
    fn rescale_tracks_peak() {
        let mut svc = Service::new(ScalingConfig::default());
        let c = ClusterId(0);
        for _ in 0..5 {
            svc.provision(c);
        }
        svc.periodic_rescale(&BTreeMap::from([(c, 2)]));
        assert_eq!(svc.allocated_count(), 3);
        svc.periodic_rescale(&BTreeMap::new());
        assert_eq!(svc.allocated_count(), 0);
        assert_eq!(svc.clusters.len(), 1);
    }
}
