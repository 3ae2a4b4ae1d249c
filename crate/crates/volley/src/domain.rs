//! Shared domain types: hosts and their processing resources, app versions,
//! job specifications, allocation balances. Everything here is a plain value
//! type; the scheduling and simulation modules own all mutation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// FLOP count, or FLOPS where a rate is meant (clear from context).
pub type Flops = f64;

/// Simulated time in integer milliseconds. Integer so that event ordering
/// never depends on float rounding.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_secs_f64(secs: f64) -> Self {
        debug_assert!(secs >= 0.0 && secs.is_finite());
        SimTime((secs * 1000.0).round() as u64)
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    pub fn as_millis(self) -> u64 {
        self.0
    }

    /// Advance by a duration given in seconds, rounding up so a nonzero
    /// duration always moves time forward.
    pub fn after_secs_f64(self, secs: f64) -> Self {
        debug_assert!(secs >= 0.0);
        SimTime(self.0 + (secs * 1000.0).ceil() as u64)
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

macro_rules! id_type {
    ($(#[$doc:meta])* $name:ident, $inner:ty) => {
        $(#[$doc])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash,
            Serialize, Deserialize, Default,
        )]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(HostId, u32);
id_type!(ProjectId, u32);
id_type!(AppId, u32);
id_type!(AppVersionId, u32);
id_type!(JobId, u64);
id_type!(
    /// Identifies one instance (replica) of a job. Globally unique, not
    /// per-job, so server maps can key on it directly.
    InstanceId,
    u64
);

/// A class of processing resource on a host: the CPU, or a GPU family
/// identified by an opaque vendor tag.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ResourceKind {
    Cpu,
    Gpu(String),
}

impl ResourceKind {
    pub fn is_gpu(&self) -> bool {
        matches!(self, ResourceKind::Gpu(_))
    }
}

impl fmt::Display for ResourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResourceKind::Cpu => write!(f, "cpu"),
            ResourceKind::Gpu(family) => write!(f, "gpu:{family}"),
        }
    }
}

impl FromStr for ResourceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "cpu" {
            Ok(ResourceKind::Cpu)
        } else if let Some(family) = s.strip_prefix("gpu:") {
            if family.is_empty() {
                Err(format!("empty GPU family in resource kind `{s}`"))
            } else {
                Ok(ResourceKind::Gpu(family.to_string()))
            }
        } else {
            Err(format!("unknown resource kind `{s}` (expected `cpu` or `gpu:<family>`)"))
        }
    }
}

impl Serialize for ResourceKind {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ResourceKind {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One resource pool on a host.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessingResource {
    pub kind: ResourceKind,
    pub instances: u32,
    /// Peak FLOPS of a single instance.
    pub peak_flops: Flops,
    /// Advertised fraction of time this resource is available; the client
    /// keeps it current from its own uptime history before each RPC.
    pub availability: f64,
    /// Driver version tag, zero when not applicable (CPUs).
    pub driver_version: u32,
}

/// How a host behaves when it reports results.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReliabilityProfile {
    Honest,
    /// Returns a wrong result with the given probability (hardware faults).
    Faulty { error_prob: f64 },
    /// Deliberately returns a wrong result with the given probability.
    Malicious { wrong_prob: f64 },
}

/// A volunteered computer as the server sees it.
#[derive(Debug, Clone)]
pub struct Host {
    pub id: HostId,
    pub resources: Vec<ProcessingResource>,
    pub os_tag: String,
    pub cpu_vendor_tag: String,
    pub cpu_model_tag: String,
    pub ram_bytes: u64,
    pub free_disk_bytes: u64,
    /// Actual sustained FLOPS divided by peak. Ground truth for the
    /// executor; scheduling code must never read it.
    pub efficiency: f64,
    pub reliability: ReliabilityProfile,
    /// Keywords the user opted into / out of. Absent keywords are neutral.
    pub keyword_yes: BTreeSet<String>,
    pub keyword_no: BTreeSet<String>,
    /// Input files resident on the host (sticky), for locality scoring.
    pub sticky_files: BTreeSet<String>,
}

impl Host {
    pub fn resource(&self, kind: &ResourceKind) -> Option<&ProcessingResource> {
        self.resources.iter().find(|r| &r.kind == kind)
    }

    pub fn cpu(&self) -> &ProcessingResource {
        self.resource(&ResourceKind::Cpu)
            .expect("host constructed without a CPU resource")
    }

    /// Sum of peak FLOPS over every instance of every resource.
    pub fn total_peak_flops(&self) -> Flops {
        self.resources
            .iter()
            .map(|r| r.instances as f64 * r.peak_flops)
            .sum()
    }
}

/// Per-host user preferences the client scheduler must respect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComputingPrefs {
    /// May be fractional (a share of the physical cores).
    pub n_usable_cpus: f64,
    pub max_ram_fraction: f64,
    /// Fraction of each second the CPU may compute; 1.0 means no throttle.
    pub throttle_duty_cycle: f64,
    /// Low-water buffer in scaled seconds per instance (B_LO).
    pub buffer_lo_seconds: f64,
    /// High-water buffer in scaled seconds per instance (B_HI).
    pub buffer_hi_seconds: f64,
}

/// Declarative host filter for an app version.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Compatibility {
    /// Allowed os tags; empty means any.
    pub os_allow: Vec<String>,
    /// Minimum GPU driver version, zero means any.
    pub min_gpu_driver: u32,
}

/// A compiled program for one app: which resources it occupies and where it
/// can run.
#[derive(Debug, Clone, PartialEq)]
pub struct AppVersion {
    pub id: AppVersionId,
    pub app: AppId,
    /// Instances of each resource kind one running job occupies. Fractional
    /// CPU usage means the job only needs part of a core.
    pub resource_usage: BTreeMap<ResourceKind, f64>,
    pub compat: Compatibility,
}

impl AppVersion {
    pub fn uses_gpu(&self) -> bool {
        self.resource_usage.keys().any(|k| k.is_gpu())
    }

    pub fn cpu_usage(&self) -> f64 {
        self.resource_usage.get(&ResourceKind::Cpu).copied().unwrap_or(0.0)
    }

    /// Whether this version can run on the host at all: os allowed, every
    /// used resource present with enough instances, driver new enough.
    pub fn is_compatible(&self, host: &Host) -> bool {
        if !self.compat.os_allow.is_empty()
            && !self.compat.os_allow.iter().any(|os| *os == host.os_tag)
        {
            return false;
        }
        if self.resource_usage.is_empty() {
            return false;
        }
        for (kind, usage) in &self.resource_usage {
            match host.resource(kind) {
                None => return false,
                Some(r) => {
                    if (r.instances as f64) < *usage {
                        return false;
                    }
                    if kind.is_gpu() && r.driver_version < self.compat.min_gpu_driver {
                        return false;
                    }
                }
            }
        }
        true
    }
}

/// Immutable parameters of a job, fixed at submission.
#[derive(Debug, Clone, PartialEq)]
pub struct JobSpec {
    pub app: AppId,
    pub submitter: ProjectId,
    pub est_flop_count: Flops,
    /// Abort bound for runaway jobs; est ≤ max.
    pub max_flop_count: Flops,
    pub est_wss_bytes: u64,
    pub disk_bound_bytes: u64,
    pub delay_bound_seconds: f64,
    pub min_quorum: u32,
    pub init_ninstances: u32,
    pub max_error_instances: u32,
    pub max_success_instances: u32,
    pub keywords: Vec<String>,
    pub input_files: Vec<String>,
    /// Quantile index for size matching (0 = smallest tercile).
    pub size_class: u8,
}

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("app version {0} declares no resource usage")]
    EmptyUsage(AppVersionId),
    #[error("host {host} lacks resource {kind} required by version {version}")]
    MissingResource {
        host: HostId,
        version: AppVersionId,
        kind: String,
    },
}

/// Peak FLOPS the version would get on the host: sum over used resources of
/// usage × per-instance peak.
pub fn peak_flops_of(version: &AppVersion, host: &Host) -> Result<Flops, DomainError> {
    if version.resource_usage.is_empty() {
        return Err(DomainError::EmptyUsage(version.id));
    }
    let mut total = 0.0;
    for (kind, usage) in &version.resource_usage {
        let r = host
            .resource(kind)
            .ok_or_else(|| DomainError::MissingResource {
                host: host.id,
                version: version.id,
                kind: kind.to_string(),
            })?;
        total += usage * r.peak_flops;
    }
    Ok(total)
}

/// Granularity of homogeneous-redundancy matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HrLevel {
    #[default]
    None,
    /// os + CPU vendor.
    Coarse,
    /// os + CPU vendor + CPU model.
    Fine,
}

/// Equivalence-class key for homogeneous redundancy. Zero means "no class"
/// (level none); real classes are nonzero so an unset job lock can use 0.
pub fn hr_class(host: &Host, level: HrLevel) -> u64 {
    let h = match level {
        HrLevel::None => return 0,
        HrLevel::Coarse => fnv1a64(&[&host.os_tag, &host.cpu_vendor_tag]),
        HrLevel::Fine => fnv1a64(&[&host.os_tag, &host.cpu_vendor_tag, &host.cpu_model_tag]),
    };
    if h == 0 {
        1
    } else {
        h
    }
}

// FNV-1a, fixed here because the class must be stable across runs; the std
// hasher is randomly seeded per process.
fn fnv1a64(parts: &[&str]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for b in part.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        // Separator byte so ("ab","c") and ("a","bc") differ.
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Linear-bounded balance for enforcing long-term shares: grows with the
/// entity's rate, shrinks with actual usage, clamped to ±cap so debt and
/// credit both stay bounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AllocationState {
    /// Normalized share of the total rate base.
    pub rate: f64,
    pub balance: f64,
    pub cap: f64,
}

impl AllocationState {
    pub fn new(rate: f64, cap: f64) -> Self {
        AllocationState { rate, balance: 0.0, cap }
    }
}

/// One accounting step. `total_rate_base` is the compute delivered per
/// elapsed second across all entities; `usage` is what this entity consumed
/// over the interval.
pub fn linear_bounded_update(
    state: &mut AllocationState,
    elapsed: f64,
    total_rate_base: f64,
    usage: f64,
) {
    debug_assert!(elapsed >= 0.0);
    let next = state.balance + state.rate * elapsed * total_rate_base - usage;
    state.balance = next.clamp(-state.cap, state.cap);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_host() -> Host {
        Host {
            id: HostId(1),
            resources: vec![
                ProcessingResource {
                    kind: ResourceKind::Cpu,
                    instances: 4,
                    peak_flops: 5e9,
                    availability: 1.0,
                    driver_version: 0,
                },
                ProcessingResource {
                    kind: ResourceKind::Gpu("green".into()),
                    instances: 1,
                    peak_flops: 1e11,
                    availability: 1.0,
                    driver_version: 7,
                },
            ],
            os_tag: "linux".into(),
            cpu_vendor_tag: "amd".into(),
            cpu_model_tag: "m1".into(),
            ram_bytes: 8 << 30,
            free_disk_bytes: 100 << 30,
            efficiency: 0.8,
            reliability: ReliabilityProfile::Honest,
            keyword_yes: BTreeSet::new(),
            keyword_no: BTreeSet::new(),
            sticky_files: BTreeSet::new(),
        }
    }

    fn cpu_version(usage: f64) -> AppVersion {
        AppVersion {
            id: AppVersionId(1),
            app: AppId(1),
            resource_usage: BTreeMap::from([(ResourceKind::Cpu, usage)]),
            compat: Compatibility::default(),
        }
    }

    #[test]
    fn balance_grows_with_rate() {
        let mut st = AllocationState::new(0.5, 86400.0);
        linear_bounded_update(&mut st, 100.0, 1.0, 0.0);
        assert_eq!(st.balance, 50.0);
    }

    #[test]
    fn balance_clamps_at_cap() {
        let mut st = AllocationState::new(1.0, 1000.0);
        linear_bounded_update(&mut st, 1e9, 1.0, 0.0);
        assert_eq!(st.balance, 1000.0);
    }

    #[test]
    fn usage_drives_balance_negative() {
        let mut st = AllocationState::new(0.0, 86400.0);
        st.balance = 50.0;
        linear_bounded_update(&mut st, 10.0, 1.0, 80.0);
        assert_eq!(st.balance, -30.0);
    }

    #[test]
    fn hr_coarse_ignores_model() {
        let a = test_host();
        let mut b = test_host();
        b.cpu_model_tag = "m2".into();
        assert_eq!(hr_class(&a, HrLevel::Coarse), hr_class(&b, HrLevel::Coarse));
        assert_ne!(hr_class(&a, HrLevel::Fine), hr_class(&b, HrLevel::Fine));
    }

    #[test]
    fn hr_none_is_zero_for_all() {
        let a = test_host();
        let mut b = test_host();
        b.os_tag = "windows".into();
        b.cpu_vendor_tag = "intel".into();
        assert_eq!(hr_class(&a, HrLevel::None), 0);
        assert_eq!(hr_class(&a, HrLevel::None), hr_class(&b, HrLevel::None));
    }

    #[test]
    fn hr_real_classes_nonzero() {
        let a = test_host();
        assert_ne!(hr_class(&a, HrLevel::Coarse), 0);
        assert_ne!(hr_class(&a, HrLevel::Fine), 0);
    }

    #[test]
    fn peak_flops_cpu_only() {
        let host = test_host();
        let v = cpu_version(1.0);
        assert_eq!(peak_flops_of(&v, &host).unwrap(), 5e9);
    }

    #[test]
    fn peak_flops_mixed_usage() {
        let mut host = test_host();
        host.resources[0].peak_flops = 4e9;
        let v = AppVersion {
            id: AppVersionId(2),
            app: AppId(1),
            resource_usage: BTreeMap::from([
                (ResourceKind::Cpu, 0.5),
                (ResourceKind::Gpu("green".into()), 1.0),
            ]),
            compat: Compatibility::default(),
        };
        assert_eq!(peak_flops_of(&v, &host).unwrap(), 1.02e11);
    }

    #[test]
    fn peak_flops_empty_usage_is_error() {
        let host = test_host();
        let v = AppVersion {
            id: AppVersionId(3),
            app: AppId(1),
            resource_usage: BTreeMap::new(),
            compat: Compatibility::default(),
        };
        assert_eq!(peak_flops_of(&v, &host), Err(DomainError::EmptyUsage(AppVersionId(3))));
    }

    #[test]
    fn compatibility_checks_os_and_driver() {
        let host = test_host();
        let mut v = cpu_version(1.0);
        v.compat.os_allow = vec!["windows".into()];
        assert!(!v.is_compatible(&host));
        v.compat.os_allow = vec!["linux".into()];
        assert!(v.is_compatible(&host));

        let mut g = AppVersion {
            id: AppVersionId(4),
            app: AppId(1),
            resource_usage: BTreeMap::from([
                (ResourceKind::Cpu, 0.2),
                (ResourceKind::Gpu("green".into()), 1.0),
            ]),
            compat: Compatibility { os_allow: vec![], min_gpu_driver: 8 },
        };
        assert!(!g.is_compatible(&host));
        g.compat.min_gpu_driver = 7;
        assert!(g.is_compatible(&host));
        // Using more instances than the host has is incompatible.
        g.resource_usage.insert(ResourceKind::Gpu("green".into()), 2.0);
        assert!(!g.is_compatible(&host));
    }

    #[test]
    fn resource_kind_round_trips_as_string() {
        for kind in [ResourceKind::Cpu, ResourceKind::Gpu("green".into())] {
            let s = kind.to_string();
            assert_eq!(s.parse::<ResourceKind>().unwrap(), kind);
        }
        assert!("gpu:".parse::<ResourceKind>().is_err());
        assert!("tpu".parse::<ResourceKind>().is_err());
    }

    #[test]
    fn sim_time_conversions() {
        let t = SimTime::from_secs_f64(1.2345);
        assert_eq!(t.as_millis(), 1235);
        assert_eq!(SimTime::ZERO.after_secs_f64(0.0001).as_millis(), 1);
    }
}
