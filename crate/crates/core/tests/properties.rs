use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use psim_core::assignment::{assign_job, AssignConfig, AssignScope, SequentialAllocator};
use psim_core::domain::{
    compute_cycle, effective_iteration, perf_loss, repetitions, slots_well_formed, AggId, AggregatorState, ClusterId,
    JobProfile, Profiles, Rational,
};
use psim_core::oracle::{compare, pool_placements, random_instance, validate_assignment};
use psim_core::profiles::{bundled_profiles, index_profiles};
use psim_core::sim::late::{handle_late_request, LateDecision};
use psim_core::sim::scenarios::{straggler_case, trace_jobs};
use psim_core::sim::{generate_trace, parse_log, replay, to_jsonl, Engine, RunConfig, SimJob, TraceGen};

fn instance(seed: u64) -> Vec<JobProfile> {
    random_instance(&mut ChaCha8Rng::seed_from_u64(seed), 3, 3)
}

fn index(jobs: &[JobProfile]) -> Profiles {
    jobs.iter().map(|j| (j.job_id.clone(), j.clone())).collect()
}

proptest! {
    #[test]
    fn cyclic_math_bounds(d in 1u64..5_000, k in 1u64..20, extra in 0u64..5_000) {
        let c = d * k + extra % d.max(1);
        let eff = effective_iteration(d, c).unwrap();
        // D <= d < 2D and reps * d == C.
        prop_assert!(eff >= Rational::from_integer(d));
        prop_assert!(eff < Rational::from_integer(2 * d));
        let reps = repetitions(c, eff);
        prop_assert_eq!(Rational::from_integer(reps) * eff, Rational::from_integer(c));
        let loss = perf_loss(d, eff).unwrap();
        prop_assert!(loss < Rational::new(1, 2));
        prop_assert_eq!(loss == Rational::from_integer(0), c % d == 0);
    }

    #[test]
    fn schedules_are_well_formed(seed in any::<u64>()) {
        let jobs = instance(seed);
        let profiles = index(&jobs);
        let mut agg = AggregatorState::new(AggId(0), ClusterId(0));
        for j in &jobs {
            for t in &j.tasks {
                agg.add_task(t.clone());
            }
        }
        if agg.refresh(&profiles).is_ok() {
            prop_assert_eq!(agg.cycle_ms, compute_cycle(jobs.iter()));
            prop_assert!(slots_well_formed(&agg.slot_schedule, agg.cycle_ms));
            for j in &jobs {
                let eff = effective_iteration(j.iter_duration_ms, agg.cycle_ms).unwrap();
                let reps = repetitions(agg.cycle_ms, eff) as usize;
                let n = agg.slot_schedule.iter().filter(|s| s.job_id == j.job_id).count();
                prop_assert_eq!(n, reps * j.tasks.len());
            }
        }
    }

    #[test]
    fn assignments_are_valid(seed in any::<u64>()) {
        let jobs = instance(seed);
        let profiles = index(&jobs);
        let cfg = AssignConfig::default();
        let mut aggs = BTreeMap::new();
        let mut alloc = SequentialAllocator::new(ClusterId(0));
        for j in &jobs {
            assign_job(j, &mut aggs, &profiles, &cfg, &AssignScope::open(), &mut alloc).unwrap();
        }
        let report = validate_assignment(&pool_placements(&aggs), &jobs);
        prop_assert!(report.is_valid(), "{:?}", report.violations);
        for a in aggs.values() {
            prop_assert!(slots_well_formed(&a.slot_schedule, a.cycle_ms));
        }
    }

    #[test]
    fn oracle_never_worse(seed in any::<u64>()) {
        let c = compare(&instance(seed), &AssignConfig::default()).unwrap();
        prop_assert!(c.oracle_bound_holds());
        prop_assert!(c.violations.is_empty());
    }

    #[test]
    fn late_requests_respect_reservations(
        cycle in 10u64..2_000,
        raw in prop::collection::vec((0u64..2_000, 1u64..200), 0..6),
        now in 0u64..10_000,
        exec in 1u64..300,
    ) {
        // Disjoint reservations inside one cycle.
        let mut slots = Vec::new();
        let mut at = 0;
        for (gap, len) in raw {
            let s = at + gap % cycle;
            if s + len > cycle {
                break;
            }
            slots.push((s, len));
            at = s + len;
        }
        match handle_late_request(cycle, &slots, &[], now, exec) {
            LateDecision::ExecuteNow(t) => {
                let base = now / cycle * cycle;
                prop_assert!(t >= now);
                prop_assert!(t + exec <= base + cycle);
                for &(s, l) in &slots {
                    let (s, e) = (base + s, base + s + l);
                    prop_assert!(t + exec <= s || t >= e, "overlaps [{}, {})", s, e);
                }
            }
            LateDecision::Postpone => {}
        }
    }

    #[test]
    fn straggler_never_touches_neighbours(seed in 1_000u64..100_000) {
        let c = straggler_case(seed).unwrap();
        prop_assert!(c.others_unchanged());
        let d = c.jobs.iter().find(|j| j.job_id == c.victim).unwrap().iter_duration_ms;
        let eff = effective_iteration(d, compute_cycle(c.jobs.iter())).unwrap();
        prop_assert!(Rational::from_integer(c.victim_shift()) <= eff);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn simulation_is_deterministic_and_replayable(seed in any::<u64>(), jobs in 3usize..25) {
        let records = generate_trace(&TraceGen { jobs, seed, mean_interarrival_s: 30.0, ..TraceGen::default() });
        let profiles = index_profiles(bundled_profiles());
        let sim = trace_jobs(&records, &profiles, "gen").unwrap();
        let cfg = RunConfig { straggler_prob: 0.05, seed, ..RunConfig::default() };
        let a = Engine::new(cfg.clone(), sim.clone()).unwrap().run().unwrap();
        let b = Engine::new(cfg, sim).unwrap().run().unwrap();
        prop_assert_eq!(&a.log, &b.log);
        prop_assert_eq!(a.stats.conservation_violations, 0);
        prop_assert!(a.stats.protocol_errors.is_empty(), "{:?}", a.stats.protocol_errors);
        let parsed = parse_log(&to_jsonl(&a.log), "mem").unwrap();
        prop_assert_eq!(replay(&parsed), a.report);
    }

    #[test]
    fn shared_aggregator_runs_no_faster_than_schedule(seed in any::<u64>()) {
        let jobs = instance(seed);
        let profiles = index(&jobs);
        let mut agg = AggregatorState::new(AggId(0), ClusterId(0));
        for j in &jobs {
            for t in &j.tasks {
                agg.add_task(t.clone());
            }
        }
        prop_assume!(agg.refresh(&profiles).is_ok());
        let cycle = agg.cycle_ms;
        let sim: Vec<SimJob> = jobs
            .iter()
            .map(|j| SimJob { fixed_hosts: Some(vec![AggId(0); j.tasks.len()]), ..SimJob::new(j.clone(), 0, 200 * cycle) })
            .collect();
        let cfg = RunConfig { monitor_iterations: 1_000_000, ..RunConfig::default() };
        let mut e = Engine::new(cfg, sim).unwrap();
        e.record_completions(true);
        let out = e.run().unwrap();
        for j in &jobs {
            let c = &out.completions[&j.job_id];
            prop_assume!(c.len() > 40);
            let tail = &c[c.len() - 31..];
            let mean = Rational::new(tail[30] - tail[0], 30);
            prop_assert!(mean >= effective_iteration(j.iter_duration_ms, cycle).unwrap());
        }
    }
}
