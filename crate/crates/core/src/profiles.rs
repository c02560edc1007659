//! Model-profile files and a small library of profiled reference models.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{default_ready_offsets, AggTask, JobId, JobProfile, Ms, TaskId};
use crate::error::InputError;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TaskRecord {
    task_id: u32,
    exec_time_ms: Ms,
    size_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ready_offset_ms: Option<Ms>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProfileRecord {
    job_id: String,
    iter_duration_ms: Ms,
    required_servers: u32,
    num_workers: u32,
    tasks: Vec<TaskRecord>,
}

impl ProfileRecord {
    fn into_profile(self) -> Result<JobProfile, String> {
        let job_id = JobId(self.job_id);
        let n = self.tasks.len();
        let defaults = default_ready_offsets(self.iter_duration_ms, n);
        let mut offsets = Vec::with_capacity(n);
        let mut tasks = Vec::with_capacity(n);
        for (i, t) in self.tasks.into_iter().enumerate() {
            let fallback = defaults[i].min(self.iter_duration_ms.saturating_sub(t.exec_time_ms));
            offsets.push(t.ready_offset_ms.unwrap_or(fallback));
            tasks.push(AggTask {
                task_id: TaskId(t.task_id),
                job_id: job_id.clone(),
                exec_time_ms: t.exec_time_ms,
                size_bytes: t.size_bytes,
            });
        }
        let p = JobProfile {
            job_id,
            iter_duration_ms: self.iter_duration_ms,
            tasks,
            required_servers: self.required_servers,
            num_workers: self.num_workers,
            tensor_ready_offsets_ms: offsets,
        };
        p.validate()?;
        Ok(p)
    }

    fn from_profile(p: &JobProfile) -> Self {
        ProfileRecord {
            job_id: p.job_id.0.clone(),
            iter_duration_ms: p.iter_duration_ms,
            required_servers: p.required_servers,
            num_workers: p.num_workers,
            tasks: p
                .tasks
                .iter()
                .zip(&p.tensor_ready_offsets_ms)
                .map(|(t, &off)| TaskRecord {
                    task_id: t.task_id.0,
                    exec_time_ms: t.exec_time_ms,
                    size_bytes: t.size_bytes,
                    ready_offset_ms: Some(off),
                })
                .collect(),
        }
    }
}

/// Parses profiles from either a JSON array or one JSON object per line.
pub fn parse_profiles(text: &str, origin: &str) -> Result<Vec<JobProfile>, InputError> {
    let malformed = |line: usize, msg: String| InputError::Malformed {
        path: origin.to_string(),
        line,
        msg,
    };
    let trimmed = text.trim_start();
    let mut out = Vec::new();
    if trimmed.starts_with('[') {
        let records: Vec<ProfileRecord> =
            serde_json::from_str(text).map_err(|e| malformed(e.line(), e.to_string()))?;
        for rec in records {
            let line = locate(text, &rec.job_id);
            out.push(rec.into_profile().map_err(|m| malformed(line, m))?);
        }
    } else {
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ProfileRecord =
                serde_json::from_str(line).map_err(|e| malformed(i + 1, e.to_string()))?;
            out.push(rec.into_profile().map_err(|m| malformed(i + 1, m))?);
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    for p in &out {
        if !seen.insert(p.job_id.clone()) {
            return Err(malformed(locate(text, &p.job_id.0), format!("duplicate profile {}", p.job_id)));
        }
    }
    Ok(out)
}

fn locate(text: &str, job_id: &str) -> usize {
    let needle = format!("\"{job_id}\"");
    text.lines().position(|l| l.contains(&needle)).map_or(1, |i| i + 1)
}

pub fn read_profiles(path: &Path) -> Result<Vec<JobProfile>, InputError> {
    let text = std::fs::read_to_string(path).map_err(|source| InputError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_profiles(&text, &path.display().to_string())
}

pub fn profiles_to_json(profiles: &[JobProfile]) -> String {
    let records: Vec<ProfileRecord> = profiles.iter().map(ProfileRecord::from_profile).collect();
    serde_json::to_string_pretty(&records).expect("profile records serialize")
}

pub fn index_profiles(profiles: Vec<JobProfile>) -> BTreeMap<JobId, JobProfile> {
    profiles.into_iter().map(|p| (p.job_id.clone(), p)).collect()
}

/// Reference models with per-layer parameter counts (weights and biases merged).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Model {
    AlexNet,
    Vgg19,
    AwdLm,
    Bert,
}

pub const MODELS: [Model; 4] = [Model::AlexNet, Model::Vgg19, Model::AwdLm, Model::Bert];

/// CPU throughput of one aggregation core, bytes of gradient per ms per worker.
pub const AGG_BYTES_PER_MS: u64 = 7_200_000;

impl Model {
    pub fn name(self) -> &'static str {
        match self {
            Model::AlexNet => "alexnet",
            Model::Vgg19 => "vgg19",
            Model::AwdLm => "awd-lm",
            Model::Bert => "bert",
        }
    }

    pub fn from_name(name: &str) -> Option<Model> {
        MODELS.into_iter().find(|m| m.name() == name)
    }

    /// Profiled iteration duration with two workers.
    pub fn iter_duration_ms(self) -> Ms {
        match self {
            Model::AlexNet => 390,
            Model::Vgg19 => 1000,
            Model::AwdLm => 700,
            Model::Bert => 1500,
        }
    }

    /// Parameter counts in layer order (input side first).
    pub fn layer_params(self) -> Vec<u64> {
        match self {
            Model::AlexNet => vec![
                34_944, 307_456, 885_120, 663_936, 442_624, 37_752_832, 16_781_312, 4_097_000,
            ],
            Model::Vgg19 => {
                let mut v = vec![1_792, 36_928, 73_856, 147_584, 295_168];
                v.extend([590_080; 3]);
                v.push(1_180_160);
                v.extend([2_359_808; 7]);
                v.extend([102_764_544, 16_781_312, 4_097_000]);
                v
            }
            Model::AwdLm => vec![13_311_200, 7_139_200, 10_589_200, 2_483_200, 33_278],
            Model::Bert => {
                let mut v = vec![23_837_184];
                for _ in 0..12 {
                    v.extend([2_363_904, 4_723_968]);
                }
                v.push(590_592);
                v
            }
        }
    }

    pub fn tensor_bytes(self) -> Vec<u64> {
        self.layer_params().into_iter().map(|p| p * 4).collect()
    }

    pub fn total_bytes(self) -> u64 {
        self.tensor_bytes().iter().sum()
    }

    /// One task per tensor. Ready offsets follow back-propagation: the last
    /// layer's gradient is produced first.
    pub fn whole_profile(self, job_id: impl Into<JobId>, servers: u32, workers: u32) -> JobProfile {
        let d = self.iter_duration_ms();
        let tasks: Vec<(Ms, u64)> = self
            .tensor_bytes()
            .into_iter()
            .map(|b| (exec_ms(b, workers), b))
            .collect();
        JobProfile::uniform(job_id, d, servers, workers, &tasks)
    }

    /// Tensors packed into `2 * servers` aggregation tasks by largest-first
    /// greedy balancing. Each task is ready when its earliest layer is.
    pub fn grouped_profile(self, job_id: impl Into<JobId>, servers: u32, workers: u32) -> JobProfile {
        let bytes = self.tensor_bytes();
        let groups = (2 * servers as usize).min(bytes.len()).max(1);
        let mut order: Vec<usize> = (0..bytes.len()).collect();
        order.sort_by(|&a, &b| bytes[b].cmp(&bytes[a]).then(a.cmp(&b)));
        let mut bins: Vec<(u64, usize)> = vec![(0, usize::MAX); groups];
        for i in order {
            let bin = (0..groups)
                .min_by_key(|&g| (bins[g].0, g))
                .expect("at least one group");
            bins[bin].0 += bytes[i];
            bins[bin].1 = bins[bin].1.min(i);
        }
        bins.sort_by_key(|&(_, first)| first);
        let tasks: Vec<(Ms, u64)> = bins
            .iter()
            .map(|&(b, _)| (exec_ms(b, workers), b))
            .collect();
        JobProfile::uniform(job_id, self.iter_duration_ms(), servers, workers, &tasks)
    }
}

fn exec_ms(bytes: u64, workers: u32) -> Ms {
    (bytes * workers as u64).div_ceil(AGG_BYTES_PER_MS).max(1)
}

/// Grouped profiles for every model at every server count in {1, 2, 4, 8}
/// with as many workers as servers. Ids look like `vgg19-4s`.
pub fn bundled_profiles() -> Vec<JobProfile> {
    let mut out = Vec::new();
    for m in MODELS {
        for s in [1u32, 2, 4, 8] {
            let p = m.grouped_profile(format!("{}-{s}s", m.name()), s, s.max(2));
            if p.validate().is_ok() {
                out.push(p);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_roundtrip() {
        let profiles = bundled_profiles();
        let text = profiles_to_json(&profiles);
        let back = parse_profiles(&text, "mem").unwrap();
        assert_eq!(profiles, back);
    }

    #[test]
    fn jsonl_with_default_offsets() {
        let text = r#"{"job_id":"a","iter_duration_ms":100,"required_servers":1,"num_workers":2,"tasks":[{"task_id":0,"exec_time_ms":5,"size_bytes":10},{"task_id":1,"exec_time_ms":5,"size_bytes":10}]}"#;
        let p = parse_profiles(text, "mem").unwrap();
        assert_eq!(p[0].tensor_ready_offsets_ms, vec![75, 50]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "\n{\"job_id\":\"a\",\"iter_duration_ms\":0,\"required_servers\":1,\"num_workers\":1,\"tasks\":[]}\n";
        match parse_profiles(text, "p.jsonl") {
            Err(InputError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_profiles("{not json", "p.jsonl"),
            Err(InputError::Malformed { line: 1, .. })
        ));
    }

    #[test]
    fn model_sizes_match_published_parameter_counts() {
        let mb = |m: Model| m.total_bytes() as f64 / 4e6;
        assert!((mb(Model::AlexNet) - 61.0).abs() < 1.0);
        assert!((mb(Model::Vgg19) - 143.7).abs() < 1.0);
        assert!((mb(Model::Bert) - 109.5).abs() < 1.5);
    }

    #[test]
    fn grouped_profiles_are_valid() {
        for p in bundled_profiles() {
            p.validate().unwrap();
            assert!(p.tasks.len() <= 2 * p.required_servers as usize);
        }
        assert_eq!(bundled_profiles().len(), 16);
    }
}
