//! Runtime statistics and projected speed.
//!
//! The server keeps running mean and variance of runtime per estimated FLOP
//! for every (host, version) pair and for every version overall. Projected
//! FLOPS prefers the pair statistic once it has enough samples, falls back
//! to the version-wide one, then to the hardware peak.

use std::collections::BTreeMap;

use crate::domain::{peak_flops_of, AppVersion, AppVersionId, Host, HostId};

/// Samples required before a mean is trusted (strictly more than this).
pub const PROJ_MIN_SAMPLES: u64 = 10;

/// Numerically stable running mean and variance.
#[derive(Debug, Clone, Copy, Default)]
pub struct Welford {
    pub count: u64,
    pub mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    /// Sample variance; zero until two samples exist.
    pub fn variance(&self) -> f64 {
        if self.count > 1 {
            self.m2 / (self.count - 1) as f64
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RuntimeStats {
    by_pair: BTreeMap<(HostId, AppVersionId), Welford>,
    by_version: BTreeMap<AppVersionId, Welford>,
}

impl RuntimeStats {
    /// Fold in one validated success: `runtime` raw seconds for a job whose
    /// estimated size was `est_flop_count`.
    pub fn record(&mut self, host: HostId, version: AppVersionId, runtime: f64, est_flop_count: f64) {
        debug_assert!(est_flop_count > 0.0);
        let ratio = runtime / est_flop_count;
        self.by_pair.entry((host, version)).or_default().push(ratio);
        self.by_version.entry(version).or_default().push(ratio);
    }

    pub fn pair(&self, host: HostId, version: AppVersionId) -> Option<&Welford> {
        self.by_pair.get(&(host, version))
    }

    pub fn version(&self, version: AppVersionId) -> Option<&Welford> {
        self.by_version.get(&version)
    }

    pub fn pair_count(&self, host: HostId, version: AppVersionId) -> u64 {
        self.pair(host, version).map_or(0, |w| w.count)
    }
}

/// Expected speed of this version on this host, in FLOPS.
///
/// Observed seconds-per-FLOP are inverted when enough samples exist for the
/// (host, version) pair, then for the version overall; otherwise the
/// hardware peak stands in. Returns None when the version cannot run on the
/// host at all.
pub fn proj_flops(stats: &RuntimeStats, host: &Host, version: &AppVersion) -> Option<f64> {
    if let Some(w) = stats.pair(host.id, version.id) {
        if w.count > PROJ_MIN_SAMPLES && w.mean > 0.0 {
            return Some(1.0 / w.mean);
        }
    }
    if let Some(w) = stats.version(version.id) {
        if w.count > PROJ_MIN_SAMPLES && w.mean > 0.0 {
            return Some(1.0 / w.mean);
        }
    }
    peak_flops_of(version, host).ok()
}

/// Estimated raw runtime of a job of `est_flop_count` FLOPs.
pub fn est_runtime(
    est_flop_count: f64,
    stats: &RuntimeStats,
    host: &Host,
    version: &AppVersion,
) -> Option<f64> {
    proj_flops(stats, host, version).map(|f| est_flop_count / f)
}
