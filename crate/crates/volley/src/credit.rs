//! Credit accounting: peak-FLOP-count claims, version and host
//! normalization, and the outlier-capped grant shared by all validated
//! instances of a job.

use std::collections::BTreeMap;

use crate::domain::{
    peak_flops_of, AppVersion, AppVersionId, Flops, Host, HostId, JobId, SimTime,
};

/// FLOPs per credit unit: one day of a 1-GFLOPS device.
pub const COBBLE: f64 = 1e9 * 86400.0;

/// Sample count below which normalization factors default to 1.
pub const NORM_MIN_SAMPLES: u64 = 10;

/// Peak FLOP count of one finished instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PfcValue {
    pub flops: Flops,
    /// Zero reported runtime; excluded from statistics.
    pub anomalous: bool,
}

/// PFC = runtime × Σ_r usage(r) × peak_flops(r), the work the device could
/// have done in the time the instance ran.
pub fn pfc(reported_runtime: f64, version: &AppVersion, host: &Host) -> PfcValue {
    if reported_runtime <= 0.0 {
        return PfcValue { flops: 0.0, anomalous: true };
    }
    let peak = peak_flops_of(version, host).unwrap_or(0.0);
    PfcValue { flops: reported_runtime * peak, anomalous: peak == 0.0 }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct RatioMean {
    count: u64,
    mean: f64,
}

impl RatioMean {
    fn push(&mut self, sample: f64) {
        self.count += 1;
        self.mean += (sample - self.mean) / self.count as f64;
    }
}

/// Running means of PFC(J)/est_flop_count(J) per app version and per
/// (host, app version), over validated instances only.
#[derive(Debug, Clone, Default)]
pub struct PfcStats {
    by_version: BTreeMap<AppVersionId, RatioMean>,
    by_host_version: BTreeMap<(HostId, AppVersionId), RatioMean>,
}

impl PfcStats {
    pub fn record_validated(
        &mut self,
        host: HostId,
        version: AppVersionId,
        pfc_flops: Flops,
        est_flop_count: Flops,
    ) {
        debug_assert!(est_flop_count > 0.0);
        let ratio = pfc_flops / est_flop_count;
        self.by_version.entry(version).or_default().push(ratio);
        self.by_host_version
            .entry((host, version))
            .or_default()
            .push(ratio);
    }

    pub fn version_count(&self, version: AppVersionId) -> u64 {
        self.by_version.get(&version).map_or(0, |m| m.count)
    }

    fn version_ratio(&self, version: AppVersionId) -> Option<(u64, f64)> {
        self.by_version.get(&version).map(|m| (m.count, m.mean))
    }

    fn host_ratio(&self, host: HostId, version: AppVersionId) -> Option<(u64, f64)> {
        self.by_host_version
            .get(&(host, version))
            .map(|m| (m.count, m.mean))
    }
}

/// Normalization toward the app's most efficient version: versions with a
/// higher mean PFC ratio did more peak-work per unit of output, so their
/// claims are scaled down to the cheapest version's level.
/// `app_versions` lists every version of the instance's app.
pub fn version_norm(
    stats: &PfcStats,
    version: AppVersionId,
    app_versions: &[AppVersionId],
) -> f64 {
    let Some((count, own)) = stats.version_ratio(version) else {
        return 1.0;
    };
    if count < NORM_MIN_SAMPLES || own <= 0.0 {
        return 1.0;
    }
    let min = app_versions
        .iter()
        .filter_map(|v| stats.version_ratio(*v))
        .filter(|(c, mean)| *c >= NORM_MIN_SAMPLES && *mean > 0.0)
        .map(|(_, mean)| mean)
        .fold(f64::INFINITY, f64::min);
    if min.is_finite() {
        min / own
    } else {
        1.0
    }
}

/// Normalization across hosts of one version: hosts that take more
/// peak-work than the version's average to produce a result are scaled
/// down, faster-than-average hosts up, so claims converge per job.
pub fn host_norm(stats: &PfcStats, host: HostId, version: AppVersionId) -> f64 {
    let Some((vc, vmean)) = stats.version_ratio(version) else {
        return 1.0;
    };
    let Some((hc, hmean)) = stats.host_ratio(host, version) else {
        return 1.0;
    };
    if vc < NORM_MIN_SAMPLES || hc < NORM_MIN_SAMPLES || hmean <= 0.0 {
        return 1.0;
    }
    vmean / hmean
}

/// Credit claim for one validated instance.
pub fn claimed_credit(
    pfc_flops: Flops,
    stats: &PfcStats,
    host: HostId,
    version: AppVersionId,
    app_versions: &[AppVersionId],
) -> f64 {
    pfc_flops * version_norm(stats, version, app_versions) * host_norm(stats, host, version)
        / COBBLE
}

/// Grant shared by all validated instances: cap each claim at twice the
/// median, then average. The cap bounds the damage of one inflated claim.
pub fn granted_credit(claims: &[f64]) -> f64 {
    assert!(!claims.is_empty(), "granted_credit needs at least one claim");
    let mut sorted = claims.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("claims are finite"));
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let cap = 2.0 * median;
    sorted.iter().map(|c| c.min(cap)).sum::<f64>() / n as f64
}

/// Grant record kept for metrics and the trace.
#[derive(Debug, Clone, PartialEq)]
pub struct CreditGrant {
    pub job: JobId,
    pub granted: f64,
    pub claimed: Vec<(crate::domain::InstanceId, f64)>,
}

/// Exponentially weighted credit rate (units per day) with a configured
/// half-life. Steady grants of X per day converge to X.
#[derive(Debug, Clone, Copy)]
pub struct RecentAverage {
    pub per_day: f64,
    last: SimTime,
    half_life_days: f64,
}

impl RecentAverage {
    pub fn new(half_life_days: f64) -> Self {
        RecentAverage { per_day: 0.0, last: SimTime::ZERO, half_life_days }
    }

    pub fn add(&mut self, now: SimTime, amount: f64) {
        let dt_days =
            now.saturating_sub(self.last).as_secs_f64() / 86400.0;
        self.per_day *= (-std::f64::consts::LN_2 * dt_days / self.half_life_days).exp();
        self.per_day += amount * std::f64::consts::LN_2 / self.half_life_days;
        self.last = now;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{
        AppId, Compatibility, ProcessingResource, ReliabilityProfile, ResourceKind,
    };
    use std::collections::{BTreeMap, BTreeSet};

    fn host_with(cpu_flops: f64, gpu_flops: Option<f64>) -> Host {
        let mut resources = vec![ProcessingResource {
            kind: ResourceKind::Cpu,
            instances: 4,
            peak_flops: cpu_flops,
            availability: 1.0,
            driver_version: 0,
        }];
        if let Some(g) = gpu_flops {
            resources.push(ProcessingResource {
                kind: ResourceKind::Gpu("green".into()),
                instances: 1,
                peak_flops: g,
                availability: 1.0,
                driver_version: 1,
            });
        }
        Host {
            id: HostId(1),
            resources,
            os_tag: "linux".into(),
            cpu_vendor_tag: "amd".into(),
            cpu_model_tag: "m1".into(),
            ram_bytes: 8 << 30,
            free_disk_bytes: 100 << 30,
            efficiency: 1.0,
            reliability: ReliabilityProfile::Honest,
            keyword_yes: BTreeSet::new(),
            keyword_no: BTreeSet::new(),
            sticky_files: BTreeSet::new(),
        }
    }

    fn version(id: u32, usage: &[(ResourceKind, f64)]) -> AppVersion {
        AppVersion {
            id: AppVersionId(id),
            app: AppId(1),
            resource_usage: BTreeMap::from_iter(usage.iter().cloned()),
            compat: Compatibility::default(),
        }
    }

    #[test]
    fn pfc_cpu_only() {
        let host = host_with(5e9, None);
        let v = version(1, &[(ResourceKind::Cpu, 1.0)]);
        let p = pfc(1000.0, &v, &host);
        assert_eq!(p.flops, 5e12);
        assert!(!p.anomalous);
    }

    #[test]
    fn pfc_mixed_resources() {
        let host = host_with(4e9, Some(1e11));
        let v = version(
            1,
            &[(ResourceKind::Cpu, 0.5), (ResourceKind::Gpu("green".into()), 1.0)],
        );
        let p = pfc(100.0, &v, &host);
        assert_eq!(p.flops, 1.02e13);
    }

    #[test]
    fn pfc_zero_runtime_is_anomalous() {
        let host = host_with(5e9, None);
        let v = version(1, &[(ResourceKind::Cpu, 1.0)]);
        let p = pfc(0.0, &v, &host);
        assert_eq!(p.flops, 0.0);
        assert!(p.anomalous);
    }

    #[test]
    fn one_cobble_is_one_credit() {
        let stats = PfcStats::default();
        let c = claimed_credit(8.64e13, &stats, HostId(1), AppVersionId(1), &[AppVersionId(1)]);
        assert_eq!(c, 1.0);
    }

    fn stats_with_version_ratios(ratios: &[(u32, f64)]) -> PfcStats {
        let mut stats = PfcStats::default();
        for (vid, ratio) in ratios {
            for i in 0..NORM_MIN_SAMPLES {
                // Spread hosts so host means stay per-host.
                stats.record_validated(
                    HostId(100 + i as u32),
                    AppVersionId(*vid),
                    *ratio,
                    1.0,
                );
            }
        }
        stats
    }

    #[test]
    fn version_norm_prefers_cheapest_version() {
        let stats = stats_with_version_ratios(&[(1, 2.0), (2, 1.0)]);
        let versions = [AppVersionId(1), AppVersionId(2)];
        assert_eq!(version_norm(&stats, AppVersionId(1), &versions), 0.5);
        assert_eq!(version_norm(&stats, AppVersionId(2), &versions), 1.0);
    }

    #[test]
    fn norms_default_to_one_below_threshold() {
        let mut stats = PfcStats::default();
        for _ in 0..(NORM_MIN_SAMPLES - 1) {
            stats.record_validated(HostId(1), AppVersionId(1), 2.0, 1.0);
        }
        assert_eq!(version_norm(&stats, AppVersionId(1), &[AppVersionId(1)]), 1.0);
        assert_eq!(host_norm(&stats, HostId(1), AppVersionId(1)), 1.0);
    }

    #[test]
    fn host_norm_identity_when_host_matches_version() {
        let mut stats = PfcStats::default();
        for _ in 0..NORM_MIN_SAMPLES {
            stats.record_validated(HostId(1), AppVersionId(1), 3.0, 1.0);
        }
        assert_eq!(host_norm(&stats, HostId(1), AppVersionId(1)), 1.0);
    }

    #[test]
    fn host_norm_scales_toward_version_mean() {
        let mut stats = PfcStats::default();
        // Host 1 ratio 4.0, host 2 ratio 2.0; version mean 3.0.
        for _ in 0..NORM_MIN_SAMPLES {
            stats.record_validated(HostId(1), AppVersionId(1), 4.0, 1.0);
            stats.record_validated(HostId(2), AppVersionId(1), 2.0, 1.0);
        }
        assert_eq!(host_norm(&stats, HostId(1), AppVersionId(1)), 0.75);
        assert_eq!(host_norm(&stats, HostId(2), AppVersionId(1)), 1.5);
    }

    #[test]
    fn version_norm_invariant_under_runtime_scaling() {
        let a = stats_with_version_ratios(&[(1, 2.0), (2, 1.0)]);
        let b = stats_with_version_ratios(&[(1, 6.0), (2, 3.0)]);
        let versions = [AppVersionId(1), AppVersionId(2)];
        assert_eq!(
            version_norm(&a, AppVersionId(1), &versions),
            version_norm(&b, AppVersionId(1), &versions)
        );
    }

    #[test]
    fn grant_of_identical_claims() {
        assert_eq!(granted_credit(&[10.0, 10.0]), 10.0);
    }

    #[test]
    fn grant_caps_outlier_at_twice_median() {
        let g = granted_credit(&[10.0, 10.0, 1000.0]);
        assert!((g - 40.0 / 3.0).abs() < 1e-12, "grant {g}");
    }

    #[test]
    fn grant_of_singleton_claim() {
        assert_eq!(granted_credit(&[7.0]), 7.0);
    }

    #[test]
    fn grant_permutation_invariant_and_bounded() {
        let claims = [3.0, 9.0, 1.0, 4.0];
        let mut rev = claims;
        rev.reverse();
        assert_eq!(granted_credit(&claims), granted_credit(&rev));
        assert!(granted_credit(&claims) <= 9.0);
    }

    #[test]
    fn recent_average_converges_to_daily_rate() {
        let mut avg = RecentAverage::new(7.0);
        // 100 credits per day in hourly grants for 70 days.
        let per_grant = 100.0 / 24.0;
        let mut t = SimTime::ZERO;
        for _ in 0..(70 * 24) {
            t = t.after_secs_f64(3600.0);
            avg.add(t, per_grant);
        }
        assert!((avg.per_day - 100.0).abs() < 2.0, "rate {}", avg.per_day);
    }
}
