//! Run reports: the JSON artifact one run writes, and the textual diff of
//! two of them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::sim::metrics::Metrics;
use crate::sim::scenario::PolicyConfig;

/// Everything needed to compare two runs: which config (by digest), which
/// seed, which policy, and what came out.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario_digest: String,
    pub seed: u64,
    pub policy: PolicyConfig,
    pub metrics: Metrics,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Num {
    U(u64),
    F(f64),
}

impl Num {
    fn as_f64(self) -> f64 {
        match self {
            Num::U(u) => u as f64,
            Num::F(f) => f,
        }
    }

    fn render(self) -> String {
        match self {
            Num::U(u) => format!("{u}"),
            Num::F(f) => format!("{f:.6}"),
        }
    }
}

fn leaves(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, Num>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                leaves(&key, child, out);
            }
        }
        serde_json::Value::Number(n) => {
            let num = match n.as_u64() {
                Some(u) => Num::U(u),
                None => Num::F(n.as_f64().unwrap_or(f64::NAN)),
            };
            out.insert(prefix.to_string(), num);
        }
        _ => {}
    }
}

fn metric_leaves(m: &Metrics) -> BTreeMap<String, Num> {
    let json = serde_json::to_value(m).expect("metrics serialize");
    let mut out = BTreeMap::new();
    leaves("", &json, &mut out);
    out
}

/// Per-metric diff of two reports, one sorted line per key. Keys present on
/// only one side are marked rather than dropped.
pub fn compare_reports(a: &RunReport, b: &RunReport) -> String {
    let la = metric_leaves(&a.metrics);
    let lb = metric_leaves(&b.metrics);
    let keys: std::collections::BTreeSet<&String> = la.keys().chain(lb.keys()).collect();
    let mut out = String::new();
    out.push_str(&format!("seed: {} vs {}\n", a.seed, b.seed));
    for key in keys {
        match (la.get(key), lb.get(key)) {
            (Some(va), Some(vb)) => {
                let delta = vb.as_f64() - va.as_f64();
                out.push_str(&format!(
                    "{key}: {} -> {} (delta {delta:+.6})\n",
                    va.render(),
                    vb.render()
                ));
            }
            (Some(va), None) => out.push_str(&format!("{key}: {} -> (absent)\n", va.render())),
            (None, Some(vb)) => out.push_str(&format!("{key}: (absent) -> {}\n", vb.render())),
            (None, None) => unreachable!(),
        }
    }
    out
}
