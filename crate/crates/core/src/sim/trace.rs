//! Job traces: CSV I/O and a synthetic generator.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{JobId, JobProfile, Profiles};
use crate::error::InputError;
use crate::profiles::MODELS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub job_id: String,
    pub submit_time_s: f64,
    pub duration_s: f64,
    pub required_servers: u32,
    pub num_workers: u32,
    pub model_profile_id: String,
}

impl TraceRecord {
    fn check(&self) -> Result<(), String> {
        if !(self.submit_time_s >= 0.0) {
            return Err("submit_time_s must be >= 0".into());
        }
        if !(self.duration_s > 0.0) {
            return Err("duration_s must be > 0".into());
        }
        if self.required_servers == 0 || self.num_workers == 0 {
            return Err("required_servers and num_workers must be >= 1".into());
        }
        Ok(())
    }

    /// The job's profile: the referenced model profile under this job's id,
    /// with the trace's server and worker counts.
    pub fn resolve(&self, profiles: &Profiles) -> Result<JobProfile, String> {
        let base = profiles
            .get(&JobId::new(self.model_profile_id.as_str()))
            .ok_or_else(|| format!("unknown model_profile_id {:?}", self.model_profile_id))?;
        let mut p = base.renamed(self.job_id.as_str());
        p.required_servers = self.required_servers;
        p.num_workers = self.num_workers;
        p.validate()?;
        Ok(p)
    }
}

pub fn parse_trace(text: &str, origin: &str) -> Result<Vec<TraceRecord>, InputError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let malformed = |line: usize, msg: String| InputError::Malformed { path: origin.to_string(), line, msg };
    let headers = rdr.headers().map_err(|e| malformed(1, e.to_string()))?.clone();
    let mut out = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| malformed(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let rec: TraceRecord = rec.deserialize(Some(&headers)).map_err(|e| malformed(line, e.to_string()))?;
        rec.check().map_err(|m| malformed(line, m))?;
        if !seen.insert(rec.job_id.clone()) {
            return Err(malformed(line, format!("duplicate job_id {}", rec.job_id)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>, InputError> {
    let text = std::fs::read_to_string(path).map_err(|source| InputError::Io { path: path.display().to_string(), source })?;
    parse_trace(&text, &path.display().to_string())
}

pub fn trace_to_csv(records: &[TraceRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r).expect("in-memory write");
    }
    if records.is_empty() {
        w.write_record(["job_id", "submit_time_s", "duration_s", "required_servers", "num_workers", "model_profile_id"])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

/// Poisson arrivals, log-normal durations, server counts in {1, 2, 4, 8}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceGen {
    pub jobs: usize,
    pub mean_interarrival_s: f64,
    pub median_duration_s: f64,
    pub duration_sigma: f64,
    pub max_duration_s: f64,
    pub seed: u64,
}

impl Default for TraceGen {
    fn default() -> Self {
        TraceGen {
            jobs: 240,
            mean_interarrival_s: 75.0,
            median_duration_s: 1200.0,
            duration_sigma: 1.0,
            max_duration_s: 4.0 * 3600.0,
            seed: 7,
        }
    }
}

const SERVER_WEIGHTS: [(u32, u32); 4] = [(1, 4), (2, 3), (4, 2), (8, 1)];

pub fn generate_trace(g: &TraceGen) -> Vec<TraceRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let gaps = Exp::new(1.0 / g.mean_interarrival_s).expect("positive rate");
    let durations = LogNormal::new(g.median_duration_s.ln(), g.duration_sigma).expect("valid log-normal");
    let total_w: u32 = SERVER_WEIGHTS.iter().map(|w| w.1).sum();
    let mut t = 0.0;
    (0..g.jobs)
        .map(|i| {
            if i > 0 {
                t += gaps.sample(&mut rng);
            }
            let d: f64 = durations.sample(&mut rng);
            let mut pick = rng.random_range(0..total_w);
            let servers = SERVER_WEIGHTS
                .iter()
                .find(|(_, w)| {
                    let hit = pick < *w;
                    pick = pick.saturating_sub(*w);
                    hit
                })
                .map_or(1, |w| w.0);
            let model = MODELS[rng.random_range(0..MODELS.len())];
            TraceRecord {
                job_id: format!("job{i:04}"),
                submit_time_s: (t * 1000.0).round() / 1000.0,
                duration_s: d.clamp(60.0, g.max_duration_s).round(),
                required_servers: servers,
                num_workers: servers.max(2),
                model_profile_id: format!("{}-{servers}s", model.name()),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles::{bundled_profiles, index_profiles};

    #[test]
    fn csv_roundtrip_and_resolve() {
        let recs = generate_trace(&TraceGen { jobs: 30, ..TraceGen::default() });
        let back = parse_trace(&trace_to_csv(&recs), "mem").unwrap();
        assert_eq!(recs, back);
        let profiles = index_profiles(bundled_profiles());
        for r in &recs {
            let p = r.resolve(&profiles).unwrap();
            assert_eq!(p.required_servers, r.required_servers);
        }
    }

    #[test]
    fn generator_is_seeded() {
        let g = TraceGen { jobs: 50, ..TraceGen::default() };
        assert_eq!(generate_trace(&g), generate_trace(&g));
        assert_ne!(generate_trace(&g), generate_trace(&TraceGen { seed: 8, ..g.clone() }));
    }

    #[test]
    fn bad_rows_report_lines() {
        let text = "job_id,submit_time_s,duration_s,required_servers,num_workers,model_profile_id\n\
                    a,0,10,1,1,x\n\
                    b,5,0,1,1,x\n";
        match parse_trace(text, "t.csv") {
            Err(InputError::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let text = "job_id,submit_time_s,duration_s,required_servers,num_workers,model_profile_id\na,zero,10,1,1,x\n";
        assert!(matches!(parse_trace(text, "t.csv"), Err(InputError::Malformed { line: 2, .. })));
        assert_eq!(parse_trace("", "t.csv").unwrap(), vec![]);
    }
}
