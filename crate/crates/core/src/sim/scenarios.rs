//! Reproducible scenarios used by the CLI, benches and acceptance tests.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assignment::AssignConfig;
use crate::domain::{AggId, AggregatorState, JobId, JobProfile, Ms, Profiles};
use crate::error::{InputError, Result};
use crate::profiles::Model;
use crate::scaling::{ScalingConfig, Service};

use super::engine::{Engine, InterferenceSpec, SimJob, SimOutput};
use super::log::Record;
use super::trace::TraceRecord;
use super::RunConfig;

#[derive(Debug, Clone)]
pub struct PackReport {
    pub aggregators: Vec<AggregatorState>,
    pub losses: BTreeMap<JobId, f64>,
    pub required_servers: u32,
    pub allocated: usize,
    /// `(required - allocated) / required`.
    pub reduction_ratio: f64,
}

/// Assigns `jobs` one after another into an empty pool.
pub fn pack(jobs: &[JobProfile], cfg: &AssignConfig) -> Result<PackReport> {
    let profiles: Profiles = jobs.iter().map(|j| (j.job_id.clone(), j.clone())).collect();
    let mut svc = Service::new(ScalingConfig::default());
    for j in jobs {
        svc.place_job(j, &profiles, cfg)?;
    }
    let losses = svc
        .losses(&profiles)?
        .into_iter()
        .map(|(j, l)| (j, num_traits::ToPrimitive::to_f64(&l).unwrap_or(0.0)))
        .collect();
    let required_servers: u32 = jobs.iter().map(|j| j.required_servers).sum();
    let allocated = svc.busy_count();
    let reduction_ratio = if required_servers == 0 {
        0.0
    } else {
        (required_servers as f64 - allocated as f64) / required_servers as f64
    };
    Ok(PackReport {
        aggregators: svc.aggs().filter(|a| !a.is_empty()).cloned().collect(),
        losses,
        required_servers,
        allocated,
        reduction_ratio,
    })
}

/// Long-iteration job with `servers` equal aggregation tasks.
pub fn packing_job(id: &str, servers: u32) -> JobProfile {
    let (exec, offsets): (Ms, Vec<Ms>) = match servers {
        2 => (150, vec![850, 700]),
        _ => (450, (0..servers as u64).map(|i| 50 + 10 * (servers as u64 - 1 - i)).collect()),
    };
    let tasks: Vec<(Ms, u64)> = (0..servers).map(|_| (exec, 8_000_000)).collect();
    JobProfile::uniform(id, 1000, servers, servers, &tasks).with_offsets(offsets)
}

/// Profiles of the packing scenarios: `long-2s` and `long-4s`.
pub fn packing_profiles() -> Vec<JobProfile> {
    vec![packing_job("long-2s", 2), packing_job("long-4s", 4)]
}

/// Steady-state normalized performance per job: profiled over the mean of
/// the last `tail` iteration durations.
pub fn steady_perf(out: &SimOutput, profiles: &[JobProfile], tail: usize) -> BTreeMap<JobId, f64> {
    profiles
        .iter()
        .filter_map(|p| {
            let c = out.completions.get(&p.job_id)?;
            if c.len() < tail + 1 {
                return None;
            }
            let w = &c[c.len() - tail - 1..];
            let mean = (w[tail] - w[0]) as f64 / tail as f64;
            Some((p.job_id.clone(), p.iter_duration_ms as f64 / mean))
        })
        .collect()
}

/// Simulates `count` copies of [`packing_job`] arriving together.
pub fn packing_run(count: usize, servers: u32, cfg: &RunConfig) -> Result<(PackReport, SimOutput, Vec<JobProfile>)> {
    let jobs: Vec<JobProfile> = (0..count).map(|i| packing_job(&format!("p{i}"), servers)).collect();
    let report = pack(&jobs, &cfg.assign())?;
    let sims = jobs.iter().map(|j| SimJob::new(j.clone(), 0, 120_000)).collect();
    let mut engine = Engine::new(cfg.clone(), sims)?;
    engine.record_completions(true);
    Ok((report, engine.run()?, jobs))
}

/// A long-iteration job on two Aggregators, then a fast job joining them.
pub fn case_study_jobs() -> Vec<SimJob> {
    let vgg = JobProfile::uniform("vgg", 1000, 2, 2, &[(600, 1), (600, 1)]);
    let alex = JobProfile::uniform("alex", 390, 2, 2, &[(90, 1), (90, 1)]);
    vec![SimJob::new(vgg, 0, 600_000), SimJob::new(alex, 60_000, 200_000)]
}

pub fn case_study(cfg: &RunConfig) -> Result<SimOutput> {
    Engine::new(cfg.clone(), case_study_jobs())?.run()
}

/// Worker-visible stalls when every tensor of `model` moves at once.
pub fn migration_stall(model: Model, cfg: &RunConfig) -> Result<Vec<Ms>> {
    let job = model.whole_profile(model.name(), 1, 2);
    let d = job.iter_duration_ms;
    let mut engine = Engine::new(cfg.clone(), vec![SimJob::new(job, 0, 60 * d)])?;
    engine.force_move(&JobId::new(model.name()), 20 * d + d / 3);
    let out = engine.run()?;
    Ok(out
        .log
        .iter()
        .filter_map(|l| match &l.record {
            Record::JobStall { stall_ms, .. } => Some(*stall_ms),
            _ => None,
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct StragglerCase {
    pub jobs: Vec<JobProfile>,
    pub victim: JobId,
    pub iteration: u64,
    pub delay_ms: Ms,
    pub baseline: BTreeMap<JobId, Vec<Ms>>,
    pub perturbed: BTreeMap<JobId, Vec<Ms>>,
}

impl StragglerCase {
    /// Largest shift of the victim's completions relative to the baseline.
    pub fn victim_shift(&self) -> Ms {
        let (b, p) = (&self.baseline[&self.victim], &self.perturbed[&self.victim]);
        b.iter().zip(p).map(|(x, y)| y.saturating_sub(*x)).max().unwrap_or(0)
    }

    pub fn others_unchanged(&self) -> bool {
        self.jobs
            .iter()
            .filter(|j| j.job_id != self.victim)
            .all(|j| self.baseline[&j.job_id] == self.perturbed[&j.job_id])
    }
}

/// Three jobs sharing one Aggregator; one straggler delay drawn from `seed`.
pub fn straggler_case(seed: u64) -> Result<StragglerCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jobs = vec![
        JobProfile::uniform("s0", 1000, 1, 2, &[(150, 1), (100, 1)]),
        JobProfile::uniform("s1", 500, 1, 2, &[(80, 1)]),
        JobProfile::uniform("s2", 1000, 1, 2, &[(120, 1)]),
    ];
    let victim = jobs[rng.random_range(0..jobs.len())].clone();
    let iteration = rng.random_range(3..20);
    let delay_ms = rng.random_range(1..=victim.iter_duration_ms / 2);
    let sim_jobs: Vec<SimJob> = jobs
        .iter()
        .map(|j| SimJob {
            fixed_hosts: Some(vec![AggId(0); j.tasks.len()]),
            ..SimJob::new(j.clone(), 0, 40_000)
        })
        .collect();
    let cfg = RunConfig { monitor_iterations: 1_000, ..RunConfig::default() };
    let run = |delay: Ms| -> Result<BTreeMap<JobId, Vec<Ms>>> {
        let mut e = Engine::new(cfg.clone(), sim_jobs.clone())?;
        e.record_completions(true);
        e.inject_straggler(&victim.job_id, 0, delay, iteration);
        Ok(e.run()?.completions)
    };
    Ok(StragglerCase {
        baseline: run(0)?,
        perturbed: run(delay_ms)?,
        victim: victim.job_id,
        iteration,
        delay_ms,
        jobs,
    })
}

pub const INTERFERENCE_START_MS: Ms = 150_000;

/// Job `j` has both tasks on Aggregator 0, job `k` one task on Aggregator 1.
/// Aggregator 0 is interfered from [`INTERFERENCE_START_MS`] on.
pub fn interference_jobs() -> Vec<SimJob> {
    let j = JobProfile::uniform("j", 1000, 2, 2, &[(200, 50_000_000), (200, 50_000_000)]);
    let k = JobProfile::uniform("k", 1000, 1, 2, &[(300, 50_000_000)]);
    vec![
        SimJob { fixed_hosts: Some(vec![AggId(0), AggId(0)]), ..SimJob::new(j, 0, 600_000) },
        SimJob { fixed_hosts: Some(vec![AggId(1)]), ..SimJob::new(k, 0, 600_000) },
    ]
}

#[derive(Debug, Clone)]
pub struct InterferenceResult {
    /// `(time_ms, job, normalized performance)` per monitoring window.
    pub timeline: Vec<(Ms, JobId, f64)>,
    pub migrations: u64,
    /// Aggregators allocated for jobs after start-up.
    pub allocations: usize,
    pub output: SimOutput,
}

impl InterferenceResult {
    /// Performance of each job in its last monitoring window.
    pub fn final_perf(&self) -> BTreeMap<JobId, f64> {
        self.timeline.iter().map(|(_, j, p)| (j.clone(), *p)).collect()
    }
}

/// Constant slowdown of Aggregator 0 from [`INTERFERENCE_START_MS`] on.
pub fn steady_interference(factor: f64) -> Vec<InterferenceSpec> {
    vec![InterferenceSpec { agg: AggId(0), start_ms: INTERFERENCE_START_MS, end_ms: 600_000, slowdown_factor: factor }]
}

/// Short bursts of competing traffic on Aggregator 0: `burst_ms` out of every `period_ms`.
pub fn bursty_interference(factor: f64, burst_ms: Ms, period_ms: Ms) -> Vec<InterferenceSpec> {
    (INTERFERENCE_START_MS..600_000)
        .step_by(period_ms as usize)
        .map(|t| InterferenceSpec { agg: AggId(0), start_ms: t, end_ms: t + burst_ms, slowdown_factor: factor })
        .collect()
}

pub fn interference_scenario(specs: &[InterferenceSpec], allow_new_aggs: bool) -> Result<InterferenceResult> {
    let cfg = RunConfig { allow_new_aggs, ..RunConfig::default() };
    let mut engine = Engine::new(cfg, interference_jobs())?;
    for s in specs {
        engine.add_interference(*s);
    }
    let output = engine.run()?;
    let mut timeline = Vec::new();
    let mut allocations = 0;
    for l in &output.log {
        match &l.record {
            Record::Monitor { job, loss, .. } => timeline.push((l.time_ms, job.clone(), 1.0 - loss)),
            Record::Scaling { action: crate::scaling::ActionKind::AllocAgg, job: Some(_), .. } if l.time_ms > 0 => {
                allocations += 1
            }
            _ => {}
        }
    }
    Ok(InterferenceResult { timeline, migrations: output.report.migrations, allocations, output })
}

/// Turns trace rows into simulation jobs. Line numbers in errors count the
/// CSV header as line 1.
pub fn trace_jobs(records: &[TraceRecord], profiles: &Profiles, origin: &str) -> Result<Vec<SimJob>, InputError> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let profile = r.resolve(profiles).map_err(|msg| InputError::Malformed {
                path: origin.to_string(),
                line: i + 2,
                msg,
            })?;
            Ok(SimJob::new(
                profile,
                (r.submit_time_s * 1000.0).round() as Ms,
                (r.duration_s * 1000.0).round().max(1.0) as Ms,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_job_packs_alone() {
        let r = pack(&[packing_job("x", 2)], &AssignConfig::default()).unwrap();
        // Both tasks fit on the first Aggregator.
        assert_eq!(r.allocated, 1);
        assert_eq!(r.reduction_ratio, 0.5);
        assert!(r.losses.values().all(|l| *l == 0.0));
    }

    #[test]
    fn straggler_case_is_seeded() {
        let a = straggler_case(3).unwrap();
        let b = straggler_case(3).unwrap();
        assert_eq!((a.victim, a.iteration, a.delay_ms), (b.victim, b.iteration, b.delay_ms));
        assert_eq!(a.perturbed, b.perturbed);
    }
}
