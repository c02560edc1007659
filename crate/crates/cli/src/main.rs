use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use psim_core::oracle::{compare, random_instance};
use psim_core::profiles::{bundled_profiles, index_profiles, profiles_to_json, read_profiles, MODELS};
use psim_core::sim::scenarios::{
    bursty_interference, case_study, interference_scenario, migration_stall, pack, packing_profiles, packing_run,
    steady_interference, steady_perf, straggler_case, trace_jobs,
};
use psim_core::sim::{generate_trace, read_trace, to_jsonl, trace_to_csv, Engine, Record, RunConfig, SimOutput, TraceGen};
use psim_core::{JobProfile, Profiles, Rational};

#[derive(Parser)]
#[command(name = "psim", version, about = "Simulator for a shared, cyclically scheduled model-aggregation service")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a job trace through the simulated service.
    Simulate(SimulateArgs),
    /// Assign jobs one by one to an empty pool and print the schedules.
    Pack(PackArgs),
    /// Compare the heuristic with exhaustive search on random small instances.
    OracleCompare(OracleArgs),
    /// Write a synthetic trace and the bundled profiles.
    GenTrace(GenTraceArgs),
    /// Run one of the built-in desk-scale scenarios.
    Scenario(ScenarioArgs),
}

#[derive(clap::Args)]
struct SimulateArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Profile JSON; the bundled profiles are used when omitted.
    #[arg(long)]
    profiles: Option<PathBuf>,
    /// TOML file with run configuration overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    interval_s: Option<u64>,
    /// Run N seeds (seed, seed+1, ...) in parallel, one output directory each.
    #[arg(long, value_name = "N")]
    sweep: Option<u64>,
}

#[derive(clap::Args)]
struct PackArgs {
    /// Jobs as profile ids, optionally repeated with `*N` (e.g. `long-2s*4`).
    #[arg(required = true)]
    jobs: Vec<String>,
    /// Profile JSON; the bundled and packing-scenario profiles are used when omitted.
    #[arg(long)]
    profiles: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(clap::Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 3)]
    max_jobs: usize,
    #[arg(long, default_value_t = 3)]
    max_tasks: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for `oracle.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct GenTraceArgs {
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    /// TOML file with generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioName {
    Packing,
    CaseStudy,
    Interference,
    MigrationStall,
    Straggler,
}

#[derive(clap::Args)]
struct ScenarioArgs {
    name: ScenarioName,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PSIM_LOG_LEVEL", "error")).init();
    match Cli::parse().cmd {
        Cmd::Simulate(a) => simulate(a),
        Cmd::Pack(a) => pack_cmd(a),
        Cmd::OracleCompare(a) => oracle_compare(a),
        Cmd::GenTrace(a) => gen_trace(a),
        Cmd::Scenario(a) => scenario(a),
    }
}

fn load_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_profiles(path: Option<&Path>, extra: Vec<JobProfile>) -> Result<Profiles> {
    let list = match path {
        Some(p) => read_profiles(p)?,
        None => bundled_profiles().into_iter().chain(extra).collect(),
    };
    Ok(index_profiles(list))
}

fn ratio_f64(r: Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_reports(dir: &Path, out: &SimOutput) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write(dir, "events.jsonl", &to_jsonl(&out.log))?;
    write(dir, "intervals.csv", &out.report.intervals_csv())?;
    write(dir, "jobs.csv", &out.report.jobs_csv())?;
    write(dir, "summary.csv", &out.report.summary_csv())?;
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg: RunConfig = load_toml(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(i) = a.interval_s {
        cfg.interval_s = i;
    }
    cfg.validate()?;
    let profiles = load_profiles(a.profiles.as_deref(), Vec::new())?;
    let records = read_trace(&a.trace)?;
    let jobs = trace_jobs(&records, &profiles, &a.trace.display().to_string())?;
    log::info!("{} jobs from {}", jobs.len(), a.trace.display());

    let Some(n) = a.sweep else {
        let out = Engine::new(cfg, jobs)?.run()?;
        write_reports(&a.out, &out)?;
        print_summary(&out);
        return Ok(());
    };
    if n == 0 {
        bail!("--sweep needs at least one run");
    }
    let seeds: Vec<u64> = (cfg.seed..cfg.seed + n).collect();
    let results: Vec<(u64, Result<SimOutput>)> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let cfg = RunConfig { seed, ..cfg.clone() };
                let jobs = jobs.clone();
                s.spawn(move || (seed, Engine::new(cfg, jobs).and_then(Engine::run).map_err(anyhow::Error::from)))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("simulation thread panicked")).collect()
    });
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["seed", "cpu_time_saving", "frac_intervals_ratio_below_1", "max_ratio", "migrations"])?;
    for (seed, out) in results {
        let out = out?;
        write_reports(&a.out.join(format!("seed-{seed}")), &out)?;
        let r = &out.report;
        w.write_record([
            seed.to_string(),
            format!("{:.6}", r.cpu_time_saving),
            format!("{:.6}", r.frac_intervals_ratio_below_1),
            format!("{:.6}", r.max_ratio),
            r.migrations.to_string(),
        ])?;
        println!("seed {seed}: CPU-time saving {:.1}%", 100.0 * r.cpu_time_saving);
    }
    fs::create_dir_all(&a.out)?;
    write(&a.out, "sweep.csv", &String::from_utf8(w.into_inner()?)?)?;
    Ok(())
}

fn print_summary(out: &SimOutput) {
    let r = &out.report;
    println!("jobs started:                {}", r.jobs_started);
    println!("simulated time:              {:.1} h", r.duration_ms as f64 / 3.6e6);
    println!("CPU-time saving:             {:.1}%", 100.0 * r.cpu_time_saving);
    println!("intervals with ratio < 1:    {:.1}%", 100.0 * r.frac_intervals_ratio_below_1);
    println!("peak Aggregators:            {}", r.peak_allocated);
    println!("migrations:                  {}", r.migrations);
    println!("reverts / rebalances:        {} / {}", r.reverts, r.rebalances);
}

fn expand_jobs(specs: &[String], profiles: &Profiles) -> Result<Vec<JobProfile>> {
    let mut jobs = Vec::new();
    for spec in specs {
        let (id, n) = match spec.split_once('*') {
            Some((id, n)) => (id, n.parse::<usize>().with_context(|| format!("bad repeat count in {spec:?}"))?),
            None => (spec.as_str(), 1),
        };
        let base = profiles
            .get(&psim_core::JobId::new(id))
            .with_context(|| format!("unknown profile {id:?}"))?;
        for _ in 0..n {
            // Copies get unique ids by position.
            let i = jobs.len();
            jobs.push(base.renamed(format!("{id}#{i}")));
        }
    }
    Ok(jobs)
}

fn pack_cmd(a: PackArgs) -> Result<()> {
    let cfg: RunConfig = load_toml(a.config.as_deref())?;
    cfg.validate()?;
    let profiles = load_profiles(a.profiles.as_deref(), packing_profiles())?;
    let jobs = expand_jobs(&a.jobs, &profiles)?;
    let r = pack(&jobs, &cfg.assign())?;
    for agg in &r.aggregators {
        println!("{} cycle {} ms", agg.agg_id, agg.cycle_ms);
        for s in &agg.slot_schedule {
            println!("  [{:>6}, {:>6}) {}/{} rep {}", s.start_ms, s.end_ms(), s.job_id, s.task_id, s.rep);
        }
    }
    for (job, loss) in &r.losses {
        println!("loss {job}: {:.4}", loss);
    }
    println!("Aggregators: {}", r.allocated);
    println!("required servers: {}", r.required_servers);
    println!("CPU reduction ratio: {:.4}", r.reduction_ratio);
    Ok(())
}

fn oracle_compare(a: OracleArgs) -> Result<()> {
    let cfg: RunConfig = load_toml(a.config.as_deref())?;
    cfg.validate()?;
    let acfg = cfg.assign();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["instance", "jobs", "tasks", "heuristic_aggs", "heuristic_loss", "oracle_loss", "gap", "violations"])?;
    let (mut violations, mut counter, mut skipped) = (0usize, 0usize, 0usize);
    let mut gaps = Vec::new();
    for i in 0..a.count {
        let jobs = random_instance(&mut rng, a.max_jobs, a.max_tasks);
        let c = compare(&jobs, &acfg)?;
        violations += c.violations.len();
        if !c.oracle_bound_holds() {
            counter += 1;
        }
        match c.gap() {
            Some(g) => gaps.push(ratio_f64(g)),
            None => {
                skipped += 1;
                log::info!("instance {i}: enumeration guard exceeded, skipped");
            }
        }
        w.write_record([
            i.to_string(),
            c.jobs.to_string(),
            c.tasks.to_string(),
            c.heuristic_aggs.to_string(),
            format!("{:.6}", ratio_f64(c.heuristic_loss)),
            c.oracle_loss.map(|o| format!("{:.6}", ratio_f64(o))).unwrap_or_default(),
            c.gap().map(|g| format!("{:.6}", ratio_f64(g))).unwrap_or_default(),
            c.violations.len().to_string(),
        ])?;
    }
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        write(dir, "oracle.csv", &String::from_utf8(w.into_inner()?)?)?;
    }
    gaps.sort_by(f64::total_cmp);
    let exact = gaps.iter().filter(|g| **g == 0.0).count();
    let pct = |q: f64| gaps.get(((gaps.len().max(1) - 1) as f64 * q).round() as usize).copied().unwrap_or(0.0);
    println!("instances: {} compared, {} skipped", gaps.len(), skipped);
    println!("constraint violations: {violations}");
    println!("oracle worse than heuristic: {counter}");
    println!("heuristic optimal: {exact}");
    println!("loss gap p50 {:.4} p90 {:.4} max {:.4}", pct(0.5), pct(0.9), pct(1.0));
    if violations > 0 || counter > 0 {
        bail!("{violations} constraint violations, {counter} bound counterexamples");
    }
    Ok(())
}

fn gen_trace(a: GenTraceArgs) -> Result<()> {
    let mut g: TraceGen = load_toml(a.config.as_deref())?;
    if let Some(s) = a.seed {
        g.seed = s;
    }
    if let Some(n) = a.jobs {
        g.jobs = n;
    }
    let records = generate_trace(&g);
    let profiles: Vec<JobProfile> = bundled_profiles().into_iter().chain(packing_profiles()).collect();
    fs::create_dir_all(&a.out)?;
    write(&a.out, "trace.csv", &trace_to_csv(&records))?;
    write(&a.out, "profiles.json", &profiles_to_json(&profiles))?;
    println!("wrote {} jobs and {} profiles to {}", records.len(), profiles.len(), a.out.display());
    Ok(())
}

fn csv_text<R: AsRef<[u8]>>(header: &[&str], rows: impl IntoIterator<Item = Vec<R>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn monitor_rows(out: &SimOutput, tag: &str) -> Vec<Vec<String>> {
    out.log
        .iter()
        .filter_map(|l| match &l.record {
            Record::Monitor { job, loss, .. } => Some(vec![
                tag.to_string(),
                format!("{:.3}", l.time_ms as f64 / 1000.0),
                job.0.clone(),
                format!("{:.6}", 1.0 - loss),
            ]),
            _ => None,
        })
        .collect()
}

fn scenario(a: ScenarioArgs) -> Result<()> {
    let cfg = RunConfig { seed: a.seed, ..RunConfig::default() };
    fs::create_dir_all(&a.out)?;
    match a.name {
        ScenarioName::Packing => {
            let mut rows = Vec::new();
            for (count, servers) in [(4usize, 2u32), (2, 4)] {
                let (r, out, jobs) = packing_run(count, servers, &cfg)?;
                let perf = steady_perf(&out, &jobs, 20);
                let worst = perf.values().copied().fold(f64::INFINITY, f64::min);
                println!("{count} x {servers}s: {} Aggregators, ratio {:.2}, worst perf {worst:.3}", r.allocated, r.reduction_ratio);
                rows.push(vec![
                    count.to_string(),
                    servers.to_string(),
                    r.allocated.to_string(),
                    format!("{:.6}", r.reduction_ratio),
                    format!("{worst:.6}"),
                ]);
            }
            write(&a.out, "packing.csv", &csv_text(&["jobs", "servers", "aggregators", "reduction_ratio", "worst_perf"], rows)?)?;
        }
        ScenarioName::CaseStudy => {
            let out = case_study(&cfg)?;
            write_reports(&a.out, &out)?;
            write(&a.out, "perf.csv", &csv_text(&["scenario", "time_s", "job", "perf"], monitor_rows(&out, "case-study"))?)?;
            print_summary(&out);
        }
        ScenarioName::Interference => {
            let mut rows = Vec::new();
            for (tag, specs) in [("mild", bursty_interference(5.0, 500, 15_000)), ("heavy", steady_interference(5.0))] {
                let r = interference_scenario(&specs, false)?;
                println!("{tag}: {} migrations, final perf {:?}", r.migrations, r.final_perf());
                rows.extend(monitor_rows(&r.output, tag));
            }
            write(&a.out, "interference.csv", &csv_text(&["scenario", "time_s", "job", "perf"], rows)?)?;
        }
        ScenarioName::MigrationStall => {
            let mut rows = Vec::new();
            for m in MODELS {
                for stall in migration_stall(m, &cfg)? {
                    println!("{:<8} {:>6.1} MB  stall {stall} ms", m.name(), m.total_bytes() as f64 / 1e6);
                    rows.push(vec![m.name().to_string(), m.total_bytes().to_string(), stall.to_string()]);
                }
            }
            write(&a.out, "stall.csv", &csv_text(&["model", "total_bytes", "stall_ms"], rows)?)?;
        }
        ScenarioName::Straggler => {
            let c = straggler_case(a.seed)?;
            println!(
                "victim {} delayed {} ms at iteration {}: shift {} ms, neighbours unchanged {}",
                c.victim,
                c.delay_ms,
                c.iteration,
                c.victim_shift(),
                c.others_unchanged()
            );
            let mut rows = Vec::new();
            for (job, base) in &c.baseline {
                for (i, (b, p)) in base.iter().zip(&c.perturbed[job]).enumerate() {
                    rows.push(vec![job.0.clone(), i.to_string(), b.to_string(), p.to_string()]);
                }
            }
            write(&a.out, "straggler.csv", &csv_text(&["job", "iteration", "baseline_ms", "perturbed_ms"], rows)?)?;
        }
    }
    Ok(())
}
