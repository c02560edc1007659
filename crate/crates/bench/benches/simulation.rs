use criterion::{criterion_group, criterion_main, Criterion};

use psim_core::migration::exhaustive_check;
use psim_core::profiles::{bundled_profiles, index_profiles};
use psim_core::sim::scenarios::{case_study, trace_jobs};
use psim_core::sim::{generate_trace, Engine, RunConfig, TraceGen};

fn trace(c: &mut Criterion) {
    let records = generate_trace(&TraceGen { jobs: 40, ..TraceGen::default() });
    let jobs = trace_jobs(&records, &index_profiles(bundled_profiles()), "gen").unwrap();
    let mut g = c.benchmark_group("simulation");
    g.sample_size(10);
    g.bench_function("trace_40_jobs", |b| {
        b.iter(|| Engine::new(RunConfig::default(), jobs.clone()).unwrap().run().unwrap().report.cpu_time_saving)
    });
    g.bench_function("case_study", |b| b.iter(|| case_study(&RunConfig::default()).unwrap().log.len()));
    g.bench_function("migration_interleavings", |b| b.iter(|| exhaustive_check(2).states));
    g.finish();
}

criterion_group!(benches, trace);
criterion_main!(benches);
