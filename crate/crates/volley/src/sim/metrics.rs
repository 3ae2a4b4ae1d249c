//! Run metrics: what a simulation reports when it finishes, and the
//! accumulator the engine feeds while events fire.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::ProjectId;

/// Five-number-ish summary of a sample set, percentiles by nearest rank.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatSummary {
    pub count: u64,
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub max: f64,
}

impl StatSummary {
    pub fn from_samples(mut samples: Vec<f64>) -> StatSummary {
        if samples.is_empty() {
            return StatSummary::default();
        }
        samples.sort_by(f64::total_cmp);
        let n = samples.len();
        let rank = |q: f64| samples[((q * n as f64).ceil() as usize).clamp(1, n) - 1];
        StatSummary {
            count: n as u64,
            mean: samples.iter().sum::<f64>() / n as f64,
            p50: rank(0.50),
            p90: rank(0.90),
            max: samples[n - 1],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub duration_days: f64,
    pub jobs_submitted: u64,
    pub jobs_succeeded: u64,
    pub jobs_failed: u64,
    /// Validated jobs per simulated day.
    pub throughput_per_day: f64,
    /// Dispatched instances per successful job, all jobs.
    pub replication_overhead: f64,
    /// Same, excluding the configured warm-up prefix of job ids.
    pub replication_overhead_tail: f64,
    /// Jobs whose canonical result differs from the ground truth.
    pub wrong_accepted: u64,
    pub wrong_accept_rate: f64,
    pub deadline_misses: u64,
    pub deadline_miss_rate: f64,
    pub instances_dispatched: u64,
    pub hosts_departed: u64,
    /// Fraction of delivered device-seconds per project; sums to 1 when any
    /// compute happened.
    pub compute_share: BTreeMap<String, f64>,
    pub credit_total: f64,
    pub credit_by_project: BTreeMap<String, f64>,
    pub batch_turnaround_seconds: StatSummary,
    pub dispatch_latency_seconds: StatSummary,
}

impl Metrics {
    /// The metrics document: one sorted `key = value` line per leaf field.
    pub fn to_document(&self) -> String {
        let json = serde_json::to_value(self).expect("metrics serialize");
        let mut lines = Vec::new();
        flatten("", &json, &mut lines);
        lines.sort();
        let mut out = String::new();
        for line in lines {
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut Vec<String>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        serde_json::Value::Number(n) => {
            let rendered = if let Some(u) = n.as_u64() {
                format!("{u}")
            } else {
                format!("{:.6}", n.as_f64().unwrap_or(f64::NAN))
            };
            out.push(format!("{prefix} = {rendered}"));
        }
        other => out.push(format!("{prefix} = {other}")),
    }
}

/// Counters the engine updates as it goes; folded into `Metrics` at the end.
#[derive(Debug, Default)]
pub struct MetricsAcc {
    pub jobs_submitted: u64,
    pub succeeded: u64,
    pub failed: u64,
    pub wrong_accepted: u64,
    pub deadline_misses: u64,
    pub hosts_departed: u64,
    /// Delivered device-seconds per project.
    pub compute: BTreeMap<ProjectId, f64>,
    pub turnarounds: Vec<f64>,
    pub latencies: Vec<f64>,
    /// (dispatched instances, jobs) over all successful jobs, and over the
    /// post-warm-up tail.
    pub overhead_all: (u64, u64),
    pub overhead_tail: (u64, u64),
}

impl MetricsAcc {
    pub fn finish(
        self,
        duration_days: f64,
        instances_dispatched: u64,
        credit_by_project: &BTreeMap<ProjectId, f64>,
        names: &BTreeMap<ProjectId, String>,
    ) -> Metrics {
        let ratio = |(inst, jobs): (u64, u64)| {
            if jobs == 0 {
                0.0
            } else {
                inst as f64 / jobs as f64
            }
        };
        let total_compute: f64 = self.compute.values().sum();
        let compute_share = self
            .compute
            .iter()
            .map(|(p, &v)| {
                let share = if total_compute > 0.0 {
                    v / total_compute
                } else {
                    0.0
                };
                (names[p].clone(), share)
            })
            .collect();
        let credit: BTreeMap<String, f64> = credit_by_project
            .iter()
            .map(|(p, &v)| (names[p].clone(), v))
            .collect();
        Metrics {
            duration_days,
            jobs_submitted: self.jobs_submitted,
            jobs_succeeded: self.succeeded,
            jobs_failed: self.failed,
            throughput_per_day: self.succeeded as f64 / duration_days,
            replication_overhead: ratio(self.overhead_all),
            replication_overhead_tail: ratio(self.overhead_tail),
            wrong_accepted: self.wrong_accepted,
            wrong_accept_rate: if self.succeeded == 0 {
                0.0
            } else {
                self.wrong_accepted as f64 / self.succeeded as f64
            },
            deadline_misses: self.deadline_misses,
            deadline_miss_rate: if instances_dispatched == 0 {
                0.0
            } else {
                self.deadline_misses as f64 / instances_dispatched as f64
            },
            instances_dispatched,
            hosts_departed: self.hosts_departed,
            compute_share,
            credit_total: credit_by_project.values().sum(),
            credit_by_project: credit,
            batch_turnaround_seconds: StatSummary::from_samples(self.turnarounds),
            dispatch_latency_seconds: StatSummary::from_samples(self.latencies),
        }
    }
}
