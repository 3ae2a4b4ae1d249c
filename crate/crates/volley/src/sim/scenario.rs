//! Scenario configuration: the TOML schema, validation with key paths,
//! dotted-path overrides, and the canonical digest used to tell two runs of
//! "the same" scenario apart.

use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::domain::HrLevel;
use crate::server::{ScoreWeights, ServerPolicy};
use crate::validation::Comparator;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse failed: {0}")]
    Parse(String),
    #[error("{path}: {msg}")]
    Invalid { path: String, msg: String },
    #[error("override {key:?}: {msg}")]
    Override { key: String, msg: String },
}

fn invalid(path: impl Into<String>, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.into(),
        msg: msg.into(),
    }
}

/// A sampling distribution with a finite mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Dist {
    Constant { value: f64 },
    Uniform { lo: f64, hi: f64 },
    /// Parameterized by the median, so the scale reads naturally; the mean
    /// is median * exp(sigma^2 / 2).
    LogNormal { median: f64, sigma: f64 },
    Exponential { mean: f64 },
}

impl Dist {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Dist::Constant { value } => value,
            Dist::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            Dist::LogNormal { median, sigma } => {
                let d = rand_distr::LogNormal::new(median.ln(), sigma)
                    .expect("validated parameters");
                d.sample(rng)
            }
            Dist::Exponential { mean } => {
                let d = rand_distr::Exp::new(1.0 / mean).expect("validated parameters");
                d.sample(rng)
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Dist::Constant { value } => value,
            Dist::Uniform { lo, hi } => 0.5 * (lo + hi),
            Dist::LogNormal { median, sigma } => median * (0.5 * sigma * sigma).exp(),
            Dist::Exponential { mean } => mean,
        }
    }

    fn validate(&self, path: &str) -> Result<(), ConfigError> {
        let ok = match *self {
            Dist::Constant { value } => value.is_finite() && value > 0.0,
            Dist::Uniform { lo, hi } => {
                lo.is_finite() && hi.is_finite() && lo > 0.0 && hi >= lo
            }
            Dist::LogNormal { median, sigma } => {
                median.is_finite() && median > 0.0 && sigma.is_finite() && sigma >= 0.0
            }
            Dist::Exponential { mean } => mean.is_finite() && mean > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(path, "distribution parameters must be positive and finite"))
        }
    }
}

impl Default for Dist {
    fn default() -> Self {
        Dist::Constant { value: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReliabilityMix {
    pub faulty_fraction: f64,
    pub faulty_error_prob: f64,
    pub malicious_fraction: f64,
    pub malicious_wrong_prob: f64,
    /// When set, all malicious hosts produce the same wrong digest, so they
    /// can outvote honest results if they reach a majority.
    pub collusion: bool,
}

impl Default for ReliabilityMix {
    fn default() -> Self {
        ReliabilityMix {
            faulty_fraction: 0.0,
            faulty_error_prob: 0.1,
            malicious_fraction: 0.0,
            malicious_wrong_prob: 0.5,
            collusion: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpuPopulation {
    /// Fraction of hosts carrying this GPU.
    pub fraction: f64,
    pub kind: String,
    pub instances: u32,
    pub peak_flops: f64,
    pub driver_version: u32,
}

impl Default for GpuPopulation {
    fn default() -> Self {
        GpuPopulation {
            fraction: 0.0,
            kind: "gpu0".into(),
            instances: 1,
            peak_flops: 1e11,
            driver_version: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HostPopulation {
    pub count: u32,
    pub n_cpus: u32,
    /// Peak FLOPS per CPU core.
    pub speed: Dist,
    /// Sustained/peak ratio; samples are clamped into (0, 1].
    pub efficiency: Dist,
    pub ram_bytes: u64,
    pub free_disk_bytes: u64,
    pub os_tags: Vec<String>,
    pub cpu_vendors: Vec<String>,
    pub cpu_models: Vec<String>,
    /// Mean length of an on-period. Ignored while `mean_off_seconds` is 0.
    pub mean_on_seconds: f64,
    /// Mean length of an off-period; 0 means always on.
    pub mean_off_seconds: f64,
    /// Per-second hazard of permanent departure; 0 means never.
    pub departure_rate: f64,
    pub reliability: ReliabilityMix,
    pub gpu: Option<GpuPopulation>,
}

impl Default for HostPopulation {
    fn default() -> Self {
        HostPopulation {
            count: 1,
            n_cpus: 4,
            speed: Dist::Constant { value: 1e9 },
            efficiency: Dist::Constant { value: 1.0 },
            ram_bytes: 8 << 30,
            free_disk_bytes: 50_000_000_000,
            os_tags: vec!["linux".into()],
            cpu_vendors: vec!["acme".into()],
            cpu_models: vec!["core9".into()],
            mean_on_seconds: 0.0,
            mean_off_seconds: 0.0,
            departure_rate: 0.0,
            reliability: ReliabilityMix::default(),
            gpu: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    /// 0 means all cores are usable.
    pub n_usable_cpus: f64,
    pub max_ram_fraction: f64,
    pub throttle_duty_cycle: f64,
    pub buffer_lo_seconds: f64,
    pub buffer_hi_seconds: f64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            n_usable_cpus: 0.0,
            max_ram_fraction: 0.75,
            throttle_duty_cycle: 1.0,
            buffer_lo_seconds: 3_600.0,
            buffer_hi_seconds: 14_400.0,
        }
    }
}

/// Everything tunable about scheduling behavior, server and client side, so
/// an A/B pair of runs can differ in exactly one key here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hr_level: HrLevel,
    pub homogeneous_version: bool,
    pub adaptive_replication: bool,
    pub adaptive_k: u32,
    pub timeout_counts_as_error: bool,
    pub score_weights: ScoreWeights,
    pub cache_slots: usize,
    pub purge_grace_seconds: f64,
    pub edf_enabled: bool,
    pub rpc_period_seconds: f64,
    pub feeder_period_seconds: f64,
    pub metrics_period_seconds: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        let server = ServerPolicy::default();
        PolicyConfig {
            hr_level: server.hr_level,
            homogeneous_version: server.homogeneous_version,
            adaptive_replication: server.adaptive_replication,
            adaptive_k: server.adaptive_k,
            timeout_counts_as_error: server.timeout_counts_as_error,
            score_weights: server.score_weights,
            cache_slots: server.cache_slots,
            purge_grace_seconds: server.purge_grace_seconds,
            edf_enabled: true,
            rpc_period_seconds: 300.0,
            feeder_period_seconds: 60.0,
            metrics_period_seconds: 3_600.0,
        }
    }
}

impl PolicyConfig {
    pub fn to_server_policy(&self) -> ServerPolicy {
        ServerPolicy {
            hr_level: self.hr_level,
            homogeneous_version: self.homogeneous_version,
            adaptive_replication: self.adaptive_replication,
            adaptive_k: self.adaptive_k,
            timeout_counts_as_error: self.timeout_counts_as_error,
            score_weights: self.score_weights,
            cache_slots: self.cache_slots,
            purge_grace_seconds: self.purge_grace_seconds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VersionConfig {
    pub cpu_usage: f64,
    pub gpu_kind: Option<String>,
    pub gpu_usage: f64,
    pub os_allow: Vec<String>,
    pub min_gpu_driver: u32,
}

impl Default for VersionConfig {
    fn default() -> Self {
        VersionConfig {
            cpu_usage: 1.0,
            gpu_kind: None,
            gpu_usage: 1.0,
            os_allow: vec![],
            min_gpu_driver: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub name: String,
    pub keywords: Vec<String>,
    pub comparator: Comparator,
    pub versions: Vec<VersionConfig>,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            name: "app".into(),
            keywords: vec![],
            comparator: Comparator::Bitwise,
            versions: vec![VersionConfig::default()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JobStreamConfig {
    /// Which app the stream submits to; empty means the project's first.
    pub app: String,
    pub batch_size: u32,
    pub batch_interval_seconds: f64,
    /// Stop after this many jobs; absent means the stream never dries up.
    pub total_jobs: Option<u64>,
    pub est_flop_count: Dist,
    /// Multiplier applied to the estimate to get the true FLOP count.
    pub true_flop_factor: Dist,
    /// Abort bound as a multiple of the estimate. A job whose true FLOP
    /// count exceeds est * max_flop_factor is a runaway and crashes.
    pub max_flop_factor: f64,
    pub est_wss_bytes: u64,
    pub disk_bound_bytes: u64,
    pub delay_bound_seconds: f64,
    pub min_quorum: u32,
    pub init_ninstances: u32,
    pub max_error_instances: u32,
    pub max_success_instances: u32,
    pub keywords: Vec<String>,
    pub input_files: Vec<String>,
    /// Fixed size class 0..=2; absent means per-batch FLOP terciles.
    pub size_class: Option<u8>,
}

impl Default for JobStreamConfig {
    fn default() -> Self {
        JobStreamConfig {
            app: String::new(),
            batch_size: 10,
            batch_interval_seconds: 3_600.0,
            total_jobs: None,
            est_flop_count: Dist::Constant { value: 3.6e12 },
            true_flop_factor: Dist::Constant { value: 1.0 },
            max_flop_factor: 10.0,
            est_wss_bytes: 100_000_000,
            disk_bound_bytes: 100_000_000,
            delay_bound_seconds: 0.0,
            min_quorum: 1,
            init_ninstances: 1,
            max_error_instances: 3,
            max_success_instances: 6,
            keywords: vec![],
            input_files: vec![],
            size_class: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectConfig {
    pub name: String,
    pub share: f64,
    pub apps: Vec<AppConfig>,
    pub jobs: JobStreamConfig,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        ProjectConfig {
            name: "project".into(),
            share: 1.0,
            apps: vec![AppConfig::default()],
            jobs: JobStreamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub duration_days: f64,
    /// Jobs excluded from the tail replication-overhead metric, so trust
    /// warm-up does not dominate it.
    pub overhead_warmup_jobs: u64,
    pub hosts: HostPopulation,
    pub client: ClientConfig,
    pub policy: PolicyConfig,
    pub projects: Vec<ProjectConfig>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            seed: 1,
            duration_days: 1.0,
            overhead_warmup_jobs: 0,
            hosts: HostPopulation::default(),
            client: ClientConfig::default(),
            policy: PolicyConfig::default(),
            projects: vec![],
        }
    }
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Scenario, ConfigError> {
        parse_with_overrides(text, &[])
    }

    /// Canonical form: the scenario re-emitted as TOML with a fixed field
    /// order. Two configs that canonicalize identically are the same run.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical_toml().as_bytes());
        let out = h.finalize();
        let mut s = String::with_capacity(64);
        for b in out {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.duration_days.is_finite() && self.duration_days > 0.0) {
            return Err(invalid("duration_days", "must be positive"));
        }
        self.validate_hosts()?;
        self.validate_client()?;
        self.validate_policy()?;
        if self.projects.is_empty() {
            return Err(invalid("projects", "at least one project required"));
        }
        for (i, p) in self.projects.iter().enumerate() {
            self.validate_project(i, p)?;
        }
        let mut names: Vec<&str> = self.projects.iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.projects.len() {
            return Err(invalid("projects", "project names must be unique"));
        }
        Ok(())
    }

    fn validate_hosts(&self) -> Result<(), ConfigError> {
        let h = &self.hosts;
        if h.count == 0 {
            return Err(invalid("hosts.count", "must be at least 1"));
        }
        if h.n_cpus == 0 {
            return Err(invalid("hosts.n_cpus", "must be at least 1"));
        }
        h.speed.validate("hosts.speed")?;
        h.efficiency.validate("hosts.efficiency")?;
        if h.mean_off_seconds < 0.0 || !h.mean_off_seconds.is_finite() {
            return Err(invalid("hosts.mean_off_seconds", "must be >= 0"));
        }
        if h.mean_off_seconds > 0.0 && h.mean_on_seconds <= 0.0 {
            return Err(invalid(
                "hosts.mean_on_seconds",
                "must be positive when off-periods exist",
            ));
        }
        if h.departure_rate < 0.0 || !h.departure_rate.is_finite() {
            return Err(invalid("hosts.departure_rate", "must be >= 0"));
        }
        if h.os_tags.is_empty() {
            return Err(invalid("hosts.os_tags", "must not be empty"));
        }
        if h.cpu_vendors.is_empty() {
            return Err(invalid("hosts.cpu_vendors", "must not be empty"));
        }
        if h.cpu_models.is_empty() {
            return Err(invalid("hosts.cpu_models", "must not be empty"));
        }
        let r = &h.reliability;
        for (v, path) in [
            (r.faulty_fraction, "hosts.reliability.faulty_fraction"),
            (r.faulty_error_prob, "hosts.reliability.faulty_error_prob"),
            (r.malicious_fraction, "hosts.reliability.malicious_fraction"),
            (r.malicious_wrong_prob, "hosts.reliability.malicious_wrong_prob"),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(path, "must be in [0, 1]"));
            }
        }
        if r.faulty_fraction + r.malicious_fraction > 1.0 {
            return Err(invalid(
                "hosts.reliability",
                "faulty_fraction + malicious_fraction must not exceed 1",
            ));
        }
        if let Some(g) = &h.gpu {
            if !(0.0..=1.0).contains(&g.fraction) {
                return Err(invalid("hosts.gpu.fraction", "must be in [0, 1]"));
            }
            if g.instances == 0 {
                return Err(invalid("hosts.gpu.instances", "must be at least 1"));
            }
            if !(g.peak_flops.is_finite() && g.peak_flops > 0.0) {
                return Err(invalid("hosts.gpu.peak_flops", "must be positive"));
            }
            if g.kind.is_empty() {
                return Err(invalid("hosts.gpu.kind", "must not be empty"));
            }
        }
        Ok(())
    }

    fn validate_client(&self) -> Result<(), ConfigError> {
        let c = &self.client;
        if c.n_usable_cpus < 0.0 || !c.n_usable_cpus.is_finite() {
            return Err(invalid("client.n_usable_cpus", "must be >= 0"));
        }
        if !(c.max_ram_fraction > 0.0 && c.max_ram_fraction <= 1.0) {
            return Err(invalid("client.max_ram_fraction", "must be in (0, 1]"));
        }
        if !(c.throttle_duty_cycle > 0.0 && c.throttle_duty_cycle <= 1.0) {
            return Err(invalid("client.throttle_duty_cycle", "must be in (0, 1]"));
        }
        if !(c.buffer_lo_seconds > 0.0 && c.buffer_lo_seconds.is_finite()) {
            return Err(invalid("client.buffer_lo_seconds", "must be positive"));
        }
        if c.buffer_hi_seconds < c.buffer_lo_seconds || !c.buffer_hi_seconds.is_finite() {
            return Err(invalid(
                "client.buffer_hi_seconds",
                "must be at least buffer_lo_seconds",
            ));
        }
        Ok(())
    }

    fn validate_policy(&self) -> Result<(), ConfigError> {
        let p = &self.policy;
        if p.adaptive_k == 0 {
            return Err(invalid("policy.adaptive_k", "must be at least 1"));
        }
        if p.cache_slots == 0 {
            return Err(invalid("policy.cache_slots", "must be at least 1"));
        }
        for (v, path) in [
            (p.rpc_period_seconds, "policy.rpc_period_seconds"),
            (p.feeder_period_seconds, "policy.feeder_period_seconds"),
            (p.metrics_period_seconds, "policy.metrics_period_seconds"),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(path, "must be positive"));
            }
        }
        if p.purge_grace_seconds < 0.0 || !p.purge_grace_seconds.is_finite() {
            return Err(invalid("policy.purge_grace_seconds", "must be >= 0"));
        }
        let w = &p.score_weights;
        for (v, path) in [
            (w.keyword, "policy.score_weights.keyword"),
            (w.alloc, "policy.score_weights.alloc"),
            (w.skip, "policy.score_weights.skip"),
            (w.locality, "policy.score_weights.locality"),
            (w.size, "policy.score_weights.size"),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(path, "must be >= 0"));
            }
        }
        Ok(())
    }

    fn validate_project(&self, i: usize, p: &ProjectConfig) -> Result<(), ConfigError> {
        let base = format!("projects[{i}]");
        if p.name.is_empty() {
            return Err(invalid(format!("{base}.name"), "must not be empty"));
        }
        if !(p.share.is_finite() && p.share > 0.0) {
            return Err(invalid(format!("{base}.share"), "must be positive"));
        }
        if p.apps.is_empty() {
            return Err(invalid(format!("{base}.apps"), "at least one app required"));
        }
        for (j, app) in p.apps.iter().enumerate() {
            let ab = format!("{base}.apps[{j}]");
            if app.name.is_empty() {
                return Err(invalid(format!("{ab}.name"), "must not be empty"));
            }
            if let Comparator::Fuzzy { tolerance } = app.comparator {
                if !(tolerance.is_finite() && tolerance > 0.0) {
                    return Err(invalid(
                        format!("{ab}.comparator.tolerance"),
                        "must be positive",
                    ));
                }
            }
            if app.versions.is_empty() {
                return Err(invalid(
                    format!("{ab}.versions"),
                    "at least one version required",
                ));
            }
            for (k, v) in app.versions.iter().enumerate() {
                let vb = format!("{ab}.versions[{k}]");
                if v.cpu_usage < 0.0 || !v.cpu_usage.is_finite() {
                    return Err(invalid(format!("{vb}.cpu_usage"), "must be >= 0"));
                }
                if v.cpu_usage == 0.0 && v.gpu_kind.is_none() {
                    return Err(invalid(
                        format!("{vb}.cpu_usage"),
                        "version must use a CPU or a GPU",
                    ));
                }
                if v.gpu_kind.is_some() && !(v.gpu_usage.is_finite() && v.gpu_usage > 0.0) {
                    return Err(invalid(format!("{vb}.gpu_usage"), "must be positive"));
                }
            }
        }
        let j = &p.jobs;
        let jb = format!("{base}.jobs");
        if !j.app.is_empty() && !p.apps.iter().any(|a| a.name == j.app) {
            return Err(invalid(format!("{jb}.app"), "names no app in this project"));
        }
        if j.batch_size == 0 {
            return Err(invalid(format!("{jb}.batch_size"), "must be at least 1"));
        }
        if !(j.batch_interval_seconds.is_finite() && j.batch_interval_seconds > 0.0) {
            return Err(invalid(
                format!("{jb}.batch_interval_seconds"),
                "must be positive",
            ));
        }
        j.est_flop_count
            .validate(&format!("{jb}.est_flop_count"))?;
        j.true_flop_factor
            .validate(&format!("{jb}.true_flop_factor"))?;
        if !(j.delay_bound_seconds.is_finite() && j.delay_bound_seconds > 0.0) {
            return Err(invalid(
                format!("{jb}.delay_bound_seconds"),
                "must be positive",
            ));
        }
        if j.min_quorum == 0 {
            return Err(invalid(format!("{jb}.min_quorum"), "must be at least 1"));
        }
        if j.init_ninstances < j.min_quorum {
            return Err(invalid(
                format!("{jb}.init_ninstances"),
                "must be at least min_quorum",
            ));
        }
        if j.max_error_instances == 0 {
            return Err(invalid(
                format!("{jb}.max_error_instances"),
                "must be at least 1",
            ));
        }
        if j.max_success_instances < j.min_quorum {
            return Err(invalid(
                format!("{jb}.max_success_instances"),
                "must be at least min_quorum",
            ));
        }
        if let Some(sc) = j.size_class {
            if sc > 2 {
                return Err(invalid(format!("{jb}.size_class"), "must be 0, 1, or 2"));
            }
        }
        if !(j.max_flop_factor >= 1.0) {
            return Err(invalid(
                format!("{jb}.max_flop_factor"),
                "must be at least 1",
            ));
        }
        Ok(())
    }
}

/// Parse TOML text, apply `key=value` overrides by dotted path (with
/// `projects[0]`-style indexing), then deserialize and hand back the result.
/// Overrides happen on the raw tree, so they go through the same
/// deserialization and validation as hand-written config.
pub fn parse_with_overrides(
    text: &str,
    overrides: &[(String, String)],
) -> Result<Scenario, ConfigError> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    let mut root = toml::Value::Table(table);
    for (key, value) in overrides {
        apply_override(&mut root, key, value)?;
    }
    Scenario::deserialize(root).map_err(|e| ConfigError::Parse(e.to_string()))
}

/// One dotted path segment: a key plus an optional index, as in
/// `projects[0]`.
fn split_segment(seg: &str) -> Result<(&str, Option<usize>), String> {
    match seg.find('[') {
        None => Ok((seg, None)),
        Some(open) => {
            let close = seg
                .rfind(']')
                .filter(|&c| c == seg.len() - 1 && c > open)
                .ok_or_else(|| format!("malformed index in segment {seg:?}"))?;
            let idx: usize = seg[open + 1..close]
                .parse()
                .map_err(|_| format!("malformed index in segment {seg:?}"))?;
            Ok((&seg[..open], Some(idx)))
        }
    }
}

fn parse_scalar(value: &str) -> toml::Value {
    if value == "true" || value == "false" {
        return toml::Value::Boolean(value == "true");
    }
    if let Ok(i) = value.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = value.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(value.to_string())
}

fn apply_override(root: &mut toml::Value, key: &str, value: &str) -> Result<(), ConfigError> {
    let err = |msg: String| ConfigError::Override {
        key: key.to_string(),
        msg,
    };
    let segments: Vec<&str> = key.split('.').collect();
    if segments.is_empty() || segments.iter().any(|s| s.is_empty()) {
        return Err(err("empty path segment".into()));
    }
    let mut node = root;
    for (pos, seg) in segments.iter().enumerate() {
        let last = pos == segments.len() - 1;
        let (name, index) = split_segment(seg).map_err(err)?;
        // Descend into the named field, creating the leaf if it is new; a
        // typo'd name surfaces later as an unknown field during decoding.
        let table = node
            .as_table_mut()
            .ok_or_else(|| err(format!("{name:?} is not reachable in the config tree")))?;
        if last && index.is_none() {
            table.insert(name.to_string(), parse_scalar(value));
            return Ok(());
        }
        node = match index {
            // Missing intermediate tables are created on the way down so an
            // override can introduce an optional section the file left out.
            None => table
                .entry(name.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new())),
            Some(i) => table
                .get_mut(name)
                .ok_or_else(|| err(format!("no such key {name:?}")))?
                .as_array_mut()
                .ok_or_else(|| err(format!("{name:?} is not an array")))?
                .get_mut(i)
                .ok_or_else(|| err(format!("index {i} out of bounds for {name:?}")))?,
        };
        if last {
            // Path ended on an indexed segment: replace that element.
            *node = parse_scalar(value);
            return Ok(());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7
duration_days = 0.1

[hosts]
count = 2

[[projects]]
name = "alpha"
share = 1.0

[projects.jobs]
batch_size = 5
total_jobs = 5
delay_bound_seconds = 36000.0
est_flop_count = { kind = "constant", value = 6.0e11 }
"#;

    #[test]
    fn minimal_config_parses_and_validates() {
        let s = Scenario::from_toml_str(MINIMAL).unwrap();
        s.validate().unwrap();
        assert_eq!(s.seed, 7);
        assert_eq!(s.hosts.count, 2);
        assert_eq!(s.projects.len(), 1);
        assert_eq!(s.projects[0].apps.len(), 1, "default app filled in");
    }

    #[test]
    fn missing_delay_bound_names_the_key_path() {
        let text = MINIMAL.replace("delay_bound_seconds = 36000.0", "");
        let s = Scenario::from_toml_str(&text).unwrap();
        let msg = s.validate().unwrap_err().to_string();
        assert!(
            msg.contains("projects[0].jobs.delay_bound_seconds"),
            "got: {msg}"
        );
    }

    #[test]
    fn bad_share_names_indexed_path() {
        let s = Scenario::from_toml_str(&MINIMAL.replace("share = 1.0", "share = -2.0")).unwrap();
        let msg = s.validate().unwrap_err().to_string();
        assert!(msg.contains("projects[0].share"), "got: {msg}");
    }

    #[test]
    fn unknown_key_rejected_at_parse() {
        let text = format!("{MINIMAL}\n[policy]\nedf_enabld = true\n");
        let err = Scenario::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("edf_enabld"), "got: {err}");
    }

    #[test]
    fn overrides_reach_nested_and_indexed_keys() {
        let sets = [
            ("seed".to_string(), "99".to_string()),
            ("policy.edf_enabled".to_string(), "false".to_string()),
            (
                "projects[0].jobs.min_quorum".to_string(),
                "2".to_string(),
            ),
            (
                "projects[0].jobs.init_ninstances".to_string(),
                "2".to_string(),
            ),
            (
                "hosts.speed".to_string(),
                "ignored-then-replaced".to_string(),
            ),
        ];
        // The speed override writes a string where a table is expected, so
        // decoding must fail loudly rather than silently keep the default.
        let err = parse_with_overrides(MINIMAL, &sets);
        assert!(err.is_err());

        let sets = &sets[..4];
        let s = parse_with_overrides(MINIMAL, sets).unwrap();
        assert_eq!(s.seed, 99);
        assert!(!s.policy.edf_enabled);
        assert_eq!(s.projects[0].jobs.min_quorum, 2);
        s.validate().unwrap();
    }

    #[test]
    fn override_bad_index_reports_key() {
        let sets = [("projects[3].share".to_string(), "2.0".to_string())];
        let err = parse_with_overrides(MINIMAL, &sets).unwrap_err().to_string();
        assert!(err.contains("projects[3].share"), "got: {err}");
    }

    #[test]
    fn canonical_form_is_a_fixed_point() {
        let s = Scenario::from_toml_str(MINIMAL).unwrap();
        let once = s.canonical_toml();
        let reparsed = Scenario::from_toml_str(&once).unwrap();
        assert_eq!(once, reparsed.canonical_toml());
        assert_eq!(s.digest(), reparsed.digest());
    }

    #[test]
    fn digest_changes_with_any_field() {
        let a = Scenario::from_toml_str(MINIMAL).unwrap();
        let b = parse_with_overrides(MINIMAL, &[("seed".into(), "8".into())]).unwrap();
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn dist_means_match_samples() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        for dist in [
            Dist::Constant { value: 3.0 },
            Dist::Uniform { lo: 1.0, hi: 5.0 },
            Dist::LogNormal { median: 2.0, sigma: 0.3 },
            Dist::Exponential { mean: 4.0 },
        ] {
            let n = 200_000;
            let sum: f64 = (0..n).map(|_| dist.sample(&mut rng)).sum();
            let sample_mean = sum / n as f64;
            let rel = (sample_mean - dist.mean()).abs() / dist.mean();
            assert!(rel < 0.02, "{dist:?}: sample mean {sample_mean} vs {}", dist.mean());
        }
    }
}
