//! Exhaustive solver for the min-max-loss assignment program, plus
//! constraint validation shared with the heuristic.

use std::collections::{BTreeMap, BTreeSet};

use num_traits::Zero;
use rand::Rng;
use serde::Serialize;

use crate::assignment::{assign_job, AssignConfig, AssignScope, SequentialAllocator};
use crate::domain::{
    AggId, AggregatorState, Assignment, ClusterId, JobProfile, Ms, Profiles, Rational, TaskKey,
};
use crate::error::{Result, ScheduleError};

/// Upper bound on `num_aggs ^ tasks` accepted by [`solve_exact`].
pub const ENUMERATION_GUARD: u64 = 10_000_000;

#[derive(Debug, Clone)]
pub struct ExactInstance {
    pub jobs: Vec<JobProfile>,
    pub num_aggs: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExactSolution {
    pub assignment: Assignment,
    pub max_loss: Rational,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "constraint", rename_all = "snake_case")]
pub enum Violation {
    /// Assignment constraint: the task is on no Aggregator.
    Unassigned { task: TaskKey },
    /// Assignment constraint: the task is on more than one Aggregator.
    Duplicated { task: TaskKey, aggs: Vec<AggId> },
    /// Capacity constraint: work per cycle exceeds the cycle.
    Overloaded { agg: AggId, work_ms: Ms, cycle_ms: Ms },
    UnknownTask { task: TaskKey },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

struct Flat<'a> {
    /// `(job index, exec)` per task in canonical order.
    tasks: Vec<(usize, Ms)>,
    keys: Vec<TaskKey>,
    jobs: Vec<&'a JobProfile>,
}

fn flatten(jobs: &[JobProfile]) -> Flat<'_> {
    let mut sorted: Vec<&JobProfile> = jobs.iter().collect();
    sorted.sort_by(|a, b| a.job_id.cmp(&b.job_id));
    let mut tasks = Vec::new();
    let mut keys = Vec::new();
    for (j, job) in sorted.iter().enumerate() {
        let mut ts: Vec<_> = job.tasks.iter().collect();
        ts.sort_by_key(|t| t.task_id);
        for t in ts {
            tasks.push((j, t.exec_time_ms));
            keys.push(t.key());
        }
    }
    Flat { tasks, keys, jobs: sorted }
}

/// Cycle-model evaluation of a full placement vector. Returns the max loss
/// and the first overloaded Aggregator, if any.
struct Evaluator {
    num_aggs: usize,
    iters: Vec<Ms>,
    cycle: Vec<Ms>,
    work: Vec<Ms>,
    d: Vec<Rational>,
}

impl Evaluator {
    fn new(num_aggs: usize, iters: Vec<Ms>) -> Self {
        let n_jobs = iters.len();
        Evaluator {
            num_aggs,
            iters,
            cycle: vec![0; num_aggs],
            work: vec![0; num_aggs],
            d: vec![Rational::zero(); n_jobs],
        }
    }

    fn eval(&mut self, tasks: &[(usize, Ms)], place: &[usize]) -> (Rational, Option<(usize, Ms, Ms)>) {
        self.cycle.iter_mut().for_each(|c| *c = 0);
        self.work.iter_mut().for_each(|w| *w = 0);
        for (&(j, _), &n) in tasks.iter().zip(place) {
            self.cycle[n] = self.cycle[n].max(self.iters[j]);
        }
        self.d.iter_mut().for_each(|d| *d = Rational::zero());
        for (&(j, _), &n) in tasks.iter().zip(place) {
            let c = self.cycle[n];
            let local = Rational::new(c, c / self.iters[j]);
            if local > self.d[j] {
                self.d[j] = local;
            }
        }
        for (&(j, e), &n) in tasks.iter().zip(place) {
            let reps = (Rational::from_integer(self.cycle[n]) / self.d[j]).to_integer();
            self.work[n] += e * reps;
        }
        let overload = (0..self.num_aggs)
            .find(|&n| self.work[n] > self.cycle[n])
            .map(|n| (n, self.work[n], self.cycle[n]));
        let mut max_loss = Rational::zero();
        for (j, d) in self.d.iter().enumerate() {
            if d.is_zero() {
                continue;
            }
            let base = Rational::from_integer(self.iters[j]);
            let loss = (*d - base) / *d;
            if loss > max_loss {
                max_loss = loss;
            }
        }
        (max_loss, overload)
    }
}

/// Enumerates every task placement over `num_aggs` Aggregators and returns
/// the feasible one minimizing the maximum loss. Ties go to the
/// lexicographically smallest placement vector (tasks ordered by job id, then
/// task id; Aggregators numbered from 0).
pub fn solve_exact(inst: &ExactInstance) -> Result<ExactSolution> {
    let flat = flatten(&inst.jobs);
    let n = flat.tasks.len();
    let aggs = inst.num_aggs as usize;
    let combos = (aggs as u64).checked_pow(n as u32);
    if aggs == 0 || combos.is_none_or(|c| c > ENUMERATION_GUARD) {
        if n == 0 {
            return Ok(ExactSolution { assignment: Assignment::default(), max_loss: Rational::zero(), feasible: true });
        }
        return Err(ScheduleError::TooLarge { aggs: inst.num_aggs, tasks: n });
    }
    let iters: Vec<Ms> = flat.jobs.iter().map(|j| j.iter_duration_ms).collect();
    let mut ev = Evaluator::new(aggs, iters);
    let mut place = vec![0usize; n];
    let mut best: Option<(Rational, Vec<usize>)> = None;
    loop {
        let (loss, overload) = ev.eval(&flat.tasks, &place);
        if overload.is_none() && best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, place.clone()));
        }
        // Odometer increment, last position fastest, keeps lexicographic order.
        let mut i = n;
        loop {
            if i == 0 {
                return Ok(match best {
                    Some((max_loss, p)) => ExactSolution {
                        assignment: to_assignment(&flat.keys, &p),
                        max_loss,
                        feasible: true,
                    },
                    None => ExactSolution {
                        assignment: Assignment::default(),
                        max_loss: Rational::zero(),
                        feasible: false,
                    },
                });
            }
            i -= 1;
            place[i] += 1;
            if place[i] < aggs {
                break;
            }
            place[i] = 0;
        }
    }
}

fn to_assignment(keys: &[TaskKey], place: &[usize]) -> Assignment {
    Assignment {
        entries: keys
            .iter()
            .zip(place)
            .map(|(k, &n)| (k.clone(), AggId(n as u32)))
            .collect(),
    }
}

/// Max loss of a placement under the cycle model, with a job's iteration
/// taken at its slowest hosting Aggregator.
pub fn assignment_max_loss(assignment: &Assignment, jobs: &[JobProfile]) -> Rational {
    let (place, aggs, flat) = indexed(assignment, jobs);
    let iters = flat.jobs.iter().map(|j| j.iter_duration_ms).collect();
    let mut ev = Evaluator::new(aggs.len().max(1), iters);
    let tasks: Vec<(usize, Ms)> = flat
        .tasks
        .iter()
        .zip(&place)
        .filter_map(|(t, p)| p.map(|_| *t))
        .collect();
    let place: Vec<usize> = place.into_iter().flatten().collect();
    ev.eval(&tasks, &place).0
}

fn indexed<'a>(assignment: &Assignment, jobs: &'a [JobProfile]) -> (Vec<Option<usize>>, Vec<AggId>, Flat<'a>) {
    let flat = flatten(jobs);
    let aggs: Vec<AggId> = assignment.aggregators().into_iter().collect();
    let place = flat
        .keys
        .iter()
        .map(|k| assignment.entries.get(k).map(|a| aggs.binary_search(a).expect("listed")))
        .collect();
    (place, aggs, flat)
}

/// Checks the assignment and capacity constraints for a list of placements, which may contain the
/// same task more than once.
pub fn validate_assignment(placements: &[(TaskKey, AggId)], jobs: &[JobProfile]) -> ValidationReport {
    let mut report = ValidationReport::default();
    let by_key: BTreeMap<TaskKey, (usize, Ms)> = {
        let flat = flatten(jobs);
        flat.keys.iter().cloned().zip(flat.tasks.iter().copied()).collect()
    };
    let mut hosts: BTreeMap<&TaskKey, Vec<AggId>> = BTreeMap::new();
    for (k, a) in placements {
        if !by_key.contains_key(k) {
            report.violations.push(Violation::UnknownTask { task: k.clone() });
            continue;
        }
        hosts.entry(k).or_default().push(*a);
    }
    for k in by_key.keys() {
        match hosts.get(k) {
            None => report.violations.push(Violation::Unassigned { task: k.clone() }),
            Some(v) if v.len() > 1 => {
                let mut aggs = v.clone();
                aggs.sort();
                report.violations.push(Violation::Duplicated { task: k.clone(), aggs });
            }
            _ => {}
        }
    }
    // Capacity with each job's iteration at its slowest host.
    let sorted_jobs = flatten(jobs).jobs;
    let iter_of = |k: &TaskKey| sorted_jobs[by_key[k].0].iter_duration_ms;
    let mut cycle: BTreeMap<AggId, Ms> = BTreeMap::new();
    for (k, a) in placements.iter().filter(|(k, _)| by_key.contains_key(k)) {
        let c = cycle.entry(*a).or_insert(0);
        *c = (*c).max(iter_of(k));
    }
    let mut d: BTreeMap<usize, Rational> = BTreeMap::new();
    for (k, a) in placements.iter().filter(|(k, _)| by_key.contains_key(k)) {
        let c = cycle[a];
        let local = Rational::new(c, c / iter_of(k));
        let e = d.entry(by_key[k].0).or_insert_with(Rational::zero);
        *e = (*e).max(local);
    }
    let mut work: BTreeMap<AggId, Ms> = BTreeMap::new();
    for (k, a) in placements.iter().filter(|(k, _)| by_key.contains_key(k)) {
        let (j, e) = by_key[k];
        let reps = (Rational::from_integer(cycle[a]) / d[&j]).to_integer();
        *work.entry(*a).or_insert(0) += e * reps;
    }
    for (a, w) in work {
        if w > cycle[&a] {
            report.violations.push(Violation::Overloaded { agg: a, work_ms: w, cycle_ms: cycle[&a] });
        }
    }
    report
}

/// Placements read directly from Aggregator states, keeping duplicates.
pub fn pool_placements(aggs: &BTreeMap<AggId, AggregatorState>) -> Vec<(TaskKey, AggId)> {
    aggs.values()
        .flat_map(|a| a.assigned.values().flatten().map(move |t| (t.key(), a.agg_id)))
        .collect()
}

/// Small random instance: up to `max_jobs` jobs of up to `max_tasks` tasks,
/// iteration durations in 2..=12 ms and execution times that keep each job
/// feasible under its declared servers.
pub fn random_instance<R: Rng>(rng: &mut R, max_jobs: usize, max_tasks: usize) -> Vec<JobProfile> {
    let n_jobs = rng.random_range(1..=max_jobs);
    (0..n_jobs)
        .map(|j| {
            let d: Ms = rng.random_range(2..=12);
            let n_tasks = rng.random_range(1..=max_tasks);
            let tasks: Vec<(Ms, u64)> = (0..n_tasks)
                .map(|_| (rng.random_range(1..=d.div_ceil(2)), rng.random_range(1..=1 << 20)))
                .collect();
            let total: Ms = tasks.iter().map(|t| t.0).sum();
            let servers = total.div_ceil(d).max(1) as u32;
            JobProfile::uniform(format!("j{j}"), d, servers, 2, &tasks)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Comparison {
    pub jobs: usize,
    pub tasks: usize,
    pub heuristic_aggs: u32,
    pub heuristic_loss: Rational,
    /// `None` when the instance exceeds the enumeration guard.
    pub oracle_loss: Option<Rational>,
    pub oracle_feasible: bool,
    pub violations: Vec<Violation>,
    /// Largest estimated loss of any job at assignment time.
    pub heuristic_estimated_loss: Rational,
}

impl Comparison {
    pub fn gap(&self) -> Option<Rational> {
        self.oracle_loss.map(|o| {
            if self.heuristic_loss > o {
                self.heuristic_loss - o
            } else {
                Rational::zero()
            }
        })
    }

    pub fn oracle_bound_holds(&self) -> bool {
        self.oracle_loss.is_none_or(|o| o <= self.heuristic_loss)
    }
}

/// Runs the heuristic on an empty pool, then the oracle at the same
/// Aggregator count.
pub fn compare(jobs: &[JobProfile], cfg: &AssignConfig) -> Result<Comparison> {
    let profiles: Profiles = jobs.iter().map(|j| (j.job_id.clone(), j.clone())).collect();
    let mut aggs = BTreeMap::new();
    let mut alloc = SequentialAllocator::new(ClusterId(0));
    for job in jobs {
        assign_job(job, &mut aggs, &profiles, cfg, &AssignScope::open(), &mut alloc)?;
    }
    let placements = pool_placements(&aggs);
    let report = validate_assignment(&placements, jobs);
    let assignment = Assignment::from_aggregators(aggs.values());
    let heuristic_loss = assignment_max_loss(&assignment, jobs);
    let used: BTreeSet<AggId> = assignment.aggregators();
    let estimated = crate::assignment::model_losses(&aggs, &profiles)?
        .into_values()
        .max()
        .unwrap_or_else(Rational::zero);
    let tasks = jobs.iter().map(|j| j.tasks.len()).sum();
    let inst = ExactInstance { jobs: jobs.to_vec(), num_aggs: used.len() as u32 };
    let (oracle_loss, oracle_feasible) = match solve_exact(&inst) {
        Ok(sol) => (sol.feasible.then_some(sol.max_loss), sol.feasible),
        Err(ScheduleError::TooLarge { .. }) => (None, false),
        Err(e) => return Err(e),
    };
    Ok(Comparison {
        jobs: jobs.len(),
        tasks,
        heuristic_aggs: used.len() as u32,
        heuristic_loss,
        oracle_loss,
        oracle_feasible,
        violations: report.violations,
        heuristic_estimated_loss: estimated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::TaskId;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn job(id: &str, d: Ms, execs: &[Ms]) -> JobProfile {
        let tasks: Vec<(Ms, u64)> = execs.iter().map(|&e| (e, 1)).collect();
        JobProfile::uniform(id, d, 2, 2, &tasks)
    }

    #[test]
    fn single_task() {
        let sol = solve_exact(&ExactInstance { jobs: vec![job("a", 5, &[1])], num_aggs: 1 }).unwrap();
        assert!(sol.feasible);
        assert_eq!(sol.max_loss, Rational::zero());
    }

    #[test]
    fn two_job_example_on_one_aggregator() {
        let sol = solve_exact(&ExactInstance {
            jobs: vec![job("j1", 6, &[2]), job("j2", 12, &[3])],
            num_aggs: 1,
        })
        .unwrap();
        assert!(sol.feasible);
        assert_eq!(sol.max_loss, Rational::zero());
    }

    #[test]
    fn worked_loss_pair() {
        let sol = solve_exact(&ExactInstance {
            jobs: vec![job("j", 5, &[1]), job("j2", 12, &[3])],
            num_aggs: 1,
        })
        .unwrap();
        assert!(sol.feasible);
        assert_eq!(sol.max_loss, Rational::new(1, 6));
    }

    #[test]
    fn infeasible_and_guard() {
        let sol = solve_exact(&ExactInstance { jobs: vec![job("a", 4, &[3, 3])], num_aggs: 1 }).unwrap();
        assert!(!sol.feasible);
        let big = job("a", 10, &[1; 24]);
        assert!(matches!(
            solve_exact(&ExactInstance { jobs: vec![big], num_aggs: 2 }),
            Err(ScheduleError::TooLarge { .. })
        ));
    }

    #[test]
    fn ties_prefer_lexicographically_smallest() {
        let sol = solve_exact(&ExactInstance { jobs: vec![job("a", 10, &[2, 2])], num_aggs: 2 }).unwrap();
        assert!(sol.assignment.entries.values().all(|a| *a == AggId(0)));
    }

    #[test]
    fn validation_reports_each_constraint() {
        let jobs = vec![job("a", 12, &[7, 6])];
        let k0 = TaskKey::new("a".into(), TaskId(0));
        let k1 = TaskKey::new("a".into(), TaskId(1));
        let dup = validate_assignment(&[(k0.clone(), AggId(0)), (k0.clone(), AggId(1)), (k1.clone(), AggId(2))], &jobs);
        assert_eq!(dup.violations, vec![Violation::Duplicated { task: k0.clone(), aggs: vec![AggId(0), AggId(1)] }]);
        let over = validate_assignment(&[(k0.clone(), AggId(0)), (k1.clone(), AggId(0))], &jobs);
        assert_eq!(over.violations, vec![Violation::Overloaded { agg: AggId(0), work_ms: 13, cycle_ms: 12 }]);
        let missing = validate_assignment(&[(k0, AggId(0))], &jobs);
        assert_eq!(missing.violations, vec![Violation::Unassigned { task: k1 }]);
    }

    #[test]
    fn heuristic_is_never_better_than_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let jobs = random_instance(&mut rng, 3, 3);
            let c = compare(&jobs, &AssignConfig::default()).unwrap();
            assert!(c.violations.is_empty(), "{c:?}");
            assert!(c.oracle_bound_holds(), "{c:?}");
        }
    }
}
