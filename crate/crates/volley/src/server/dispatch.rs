//! The dispatch pipeline: answer one work request.
//!
//! GPU resources are served before the CPU. For each requested resource the
//! cache is scanned from a random start, each entry gets its best admissible
//! app version and a score, and candidates are consumed best-first through
//! the fast (request-local) and slow (store) checks until the request is
//! satisfied.

use std::collections::BTreeSet;

use rand::Rng;

use crate::domain::{hr_class, AppVersion, Host, JobId, ResourceKind, SimTime};
use crate::lifecycle::{mark_dispatched, shrink_to_single, InstanceState};
use crate::trace::{Trace, Value};
use crate::validation::should_replicate;

use super::cache::CachedEntry;
use super::stats::proj_flops;
use super::{JobAssignment, RpcReply, RpcRequest, ServerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipReason {
    NoVersion,
    Disk,
    Deadline,
    DupInReply,
    AlreadySent,
    Terminal,
    HrViolation,
}

impl SkipReason {
    pub fn tag(self) -> &'static str {
        match self {
            SkipReason::NoVersion => "no_version",
            SkipReason::Disk => "disk",
            SkipReason::Deadline => "deadline",
            SkipReason::DupInReply => "dup_in_reply",
            SkipReason::AlreadySent => "already_sent",
            SkipReason::Terminal => "terminal",
            SkipReason::HrViolation => "hr_violation",
        }
    }
}

/// Whether a version is the right shape for a resource request: GPU
/// requests want versions using that GPU kind, CPU requests want CPU-only
/// versions.
fn version_matches_kind(v: &AppVersion, kind: &ResourceKind) -> bool {
    match kind {
        ResourceKind::Cpu => !v.uses_gpu() && v.resource_usage.contains_key(kind),
        ResourceKind::Gpu(_) => v.resource_usage.contains_key(kind),
    }
}

struct Candidate {
    slot: usize,
    entry: CachedEntry,
    version: AppVersion,
    proj: f64,
    score: f64,
}

impl ServerState {
    /// Refresh per-version host speed terciles, at most once per simulated
    /// day. With fewer than three known hosts everyone counts as mid-tier.
    fn ensure_terciles(&mut self, now: SimTime) {
        let stale = match self.terciles_computed {
            None => true,
            Some(at) => now.saturating_sub(at).as_secs_f64() >= 86_400.0,
        };
        if !stale {
            return;
        }
        self.terciles_computed = Some(now);
        self.terciles.clear();
        for app in self.apps.values() {
            for v in &app.versions {
                let mut speeds: Vec<f64> = self
                    .hosts
                    .values()
                    .filter(|h| v.is_compatible(h))
                    .filter_map(|h| proj_flops(&self.stats, h, v))
                    .collect();
                if speeds.len() < 3 {
                    continue;
                }
                speeds.sort_by(f64::total_cmp);
                let b1 = speeds[speeds.len() / 3];
                let b2 = speeds[2 * speeds.len() / 3];
                self.terciles.insert(v.id, (b1, b2));
            }
        }
    }

    /// Speed tier of this host for this version: 0 slow, 1 mid, 2 fast.
    fn host_tercile(&self, host: &Host, version: &AppVersion) -> u8 {
        let Some(&(b1, b2)) = self.terciles.get(&version.id) else {
            return 1;
        };
        match proj_flops(&self.stats, host, version) {
            Some(s) if s < b1 => 0,
            Some(s) if s < b2 => 1,
            Some(_) => 2,
            None => 1,
        }
    }

    /// Best admissible version of this job for this host and resource:
    /// respects an app-version lock, requires compatibility, maximizes
    /// projected FLOPS (first wins ties, so config order is the tiebreak).
    fn best_version(
        &self,
        job: &crate::lifecycle::Job,
        host: &Host,
        kind: &ResourceKind,
    ) -> Option<(AppVersion, f64)> {
        let app = self.app(job.spec.app);
        let mut best: Option<(&AppVersion, f64)> = None;
        for v in &app.versions {
            if let Some(lock) = job.app_version_lock {
                if v.id != lock {
                    continue;
                }
            }
            if !version_matches_kind(v, kind) || !v.is_compatible(host) {
                continue;
            }
            let Some(p) = proj_flops(&self.stats, host, v) else {
                continue;
            };
            if best.map_or(true, |(_, bp)| p > bp) {
                best = Some((v, p));
            }
        }
        best.map(|(v, p)| (v.clone(), p))
    }

    /// Value of sending this job to this host, or None when a "no" keyword
    /// excludes it outright.
    fn score_job(
        &self,
        job: &crate::lifecycle::Job,
        host: &Host,
        version: &AppVersion,
    ) -> Option<f64> {
        if job
            .spec
            .keywords
            .iter()
            .any(|k| host.keyword_no.contains(k))
        {
            return None;
        }
        let w = self.policy.score_weights;
        let mut score = 0.0;
        let yes = job
            .spec
            .keywords
            .iter()
            .filter(|k| host.keyword_yes.contains(*k))
            .count();
        score += w.keyword * yes as f64;
        score += w.alloc * self.normalized_balance(self.app(job.spec.app).project);
        if self.skip_counts.get(&job.id).copied().unwrap_or(0) > 0 {
            score += w.skip;
        }
        if !job.spec.input_files.is_empty()
            && job
                .spec
                .input_files
                .iter()
                .all(|f| host.sticky_files.contains(f))
        {
            score += w.locality;
        }
        if job.spec.size_class == self.host_tercile(host, version) {
            score += w.size;
        }
        Some(score)
    }

    /// Answer one RPC: absorb reports, then satisfy the work request per
    /// resource, GPUs first.
    pub fn handle_request(
        &mut self,
        req: &RpcRequest,
        now: SimTime,
        trace: &mut Trace,
    ) -> RpcReply {
        let mut reply = RpcReply::default();
        let sane = req.availability > 0.0
            && req.availability <= 1.0
            && req.duty_cycle > 0.0
            && req.duty_cycle <= 1.0
            && !req.host.resources.is_empty();
        if !sane {
            log::warn!(
                "rejecting malformed request from host {}: availability {} duty {}",
                req.host.id.0,
                req.availability,
                req.duty_cycle
            );
            return reply;
        }
        self.hosts.insert(req.host.id, req.host.clone());
        self.advance_alloc(now);
        for report in &req.reports {
            self.handle_report(report, now, trace);
        }
        let Some(work) = &req.work else {
            return reply;
        };
        self.ensure_terciles(now);

        let host = &req.host;
        let host_class = hr_class(host, self.policy.hr_level);
        let scale = req.availability * req.duty_cycle;

        let mut kinds: Vec<&ResourceKind> = work.resources.keys().collect();
        kinds.sort_by(|a, b| {
            b.is_gpu()
                .cmp(&a.is_gpu())
                .then_with(|| a.cmp(b))
        });

        let mut sent_jobs: BTreeSet<JobId> = BTreeSet::new();
        let mut disk_remaining = host.free_disk_bytes as i128;

        for kind in kinds {
            let rr = &work.resources[kind];
            let mut rem_runtime = rr.req_runtime_seconds;
            let mut rem_idle = rr.req_idle as f64;
            let mut queue_dur = rr.queue_dur_seconds;
            if rem_runtime <= 0.0 && rem_idle <= 0.0 {
                continue;
            }

            let start = self.rng.random_range(0..self.cache.n_slots());
            let mut cands: Vec<Candidate> = Vec::new();
            let mut stale: Vec<usize> = Vec::new();
            let mut no_version: Vec<JobId> = Vec::new();
            for (slot, entry) in self.cache.iter_from(start) {
                let Some(job) = self.jobs.get(&entry.job) else {
                    stale.push(slot);
                    continue;
                };
                if job.is_terminal()
                    || job
                        .instance(entry.instance)
                        .map_or(true, |i| i.state != InstanceState::Unsent)
                {
                    stale.push(slot);
                    continue;
                }
                let app = self.app(job.spec.app);
                if app.project != work.project {
                    continue;
                }
                if !app.versions.iter().any(|v| version_matches_kind(v, kind)) {
                    continue;
                }
                match self.best_version(job, host, kind) {
                    None => no_version.push(entry.job),
                    Some((version, proj)) => {
                        if let Some(score) = self.score_job(job, host, &version) {
                            cands.push(Candidate {
                                slot,
                                entry,
                                version,
                                proj,
                                score,
                            });
                        }
                    }
                }
            }
            for slot in stale {
                self.cache.take(slot);
            }
            for job in no_version {
                self.note_skip(job, SkipReason::NoVersion, host.id, now, trace);
            }
            // Stable sort: equal scores stay in scan order.
            cands.sort_by(|a, b| b.score.total_cmp(&a.score));

            for c in cands {
                if rem_runtime <= 0.0 && rem_idle <= 0.0 {
                    break;
                }
                let Some(job) = self.jobs.get(&c.entry.job) else {
                    continue;
                };
                // An earlier accept in this pass may have shrunk or resolved
                // this job; its leftover entries are stale, not skips.
                if job
                    .instance(c.entry.instance)
                    .map_or(true, |i| i.state != InstanceState::Unsent)
                {
                    self.cache.take(c.slot);
                    continue;
                }
                let est_raw = job.spec.est_flop_count / c.proj;
                let e_scaled = est_raw / scale;

                // Fast checks: request-local.
                if job.spec.disk_bound_bytes as i128 > disk_remaining {
                    self.note_skip(c.entry.job, SkipReason::Disk, host.id, now, trace);
                    continue;
                }
                if queue_dur + e_scaled > job.spec.delay_bound_seconds {
                    self.note_skip(c.entry.job, SkipReason::Deadline, host.id, now, trace);
                    continue;
                }
                if sent_jobs.contains(&c.entry.job) {
                    self.note_skip(c.entry.job, SkipReason::DupInReply, host.id, now, trace);
                    continue;
                }
                // Slow checks: against the store.
                if job.is_terminal() {
                    self.note_skip(c.entry.job, SkipReason::Terminal, host.id, now, trace);
                    self.cache.take(c.slot);
                    continue;
                }
                if job.instances.iter().any(|i| i.host == Some(host.id)) {
                    self.note_skip(c.entry.job, SkipReason::AlreadySent, host.id, now, trace);
                    continue;
                }
                if job.hr_class_lock != 0 && job.hr_class_lock != host_class {
                    self.note_skip(c.entry.job, SkipReason::HrViolation, host.id, now, trace);
                    continue;
                }

                // Accept.
                let job_id = c.entry.job;
                let (project, app_id) = {
                    let app = self.app(job.spec.app);
                    (app.project, app.id)
                };
                let adaptive = self.policy.adaptive_replication;
                let k = self.policy.adaptive_k as u64;
                let job = self.jobs.get_mut(&job_id).expect("job present");
                if adaptive
                    && job.min_quorum > 1
                    && job.undispatched()
                    && !should_replicate(&self.repl, host.id, c.version.id, k, &mut self.rng)
                {
                    shrink_to_single(job, c.entry.instance);
                    trace.emit(
                        now,
                        "replication_skipped",
                        &[
                            ("host", Value::U(host.id.0 as u64)),
                            ("job", Value::U(job_id.0)),
                        ],
                    );
                }
                let deadline = mark_dispatched(job, c.entry.instance, host.id, c.version.id, now);
                let lock_version = if self.policy.homogeneous_version {
                    Some(c.version.id)
                } else {
                    None
                };
                job.set_locks(host_class, lock_version);
                let assignment = JobAssignment {
                    job: job_id,
                    instance: c.entry.instance,
                    app: app_id,
                    project,
                    version: c.version.id,
                    usage: c.version.resource_usage.clone(),
                    est_flop_count: job.spec.est_flop_count,
                    est_runtime_raw: est_raw,
                    est_wss_bytes: job.spec.est_wss_bytes,
                    disk_bound_bytes: job.spec.disk_bound_bytes,
                    delay_bound_seconds: job.spec.delay_bound_seconds,
                    deadline,
                };
                let device_seconds: f64 =
                    est_raw * c.version.resource_usage.values().sum::<f64>();
                trace.emit(
                    now,
                    "dispatch",
                    &[
                        ("host", Value::U(host.id.0 as u64)),
                        ("instance", Value::U(c.entry.instance.0)),
                        ("job", Value::U(job_id.0)),
                        ("score", Value::F(c.score)),
                        ("version", Value::U(c.version.id.0 as u64)),
                    ],
                );
                trace.emit(
                    now,
                    "instance_dispatched",
                    &[
                        ("deadline", Value::U(deadline.as_millis())),
                        ("host", Value::U(host.id.0 as u64)),
                        ("instance", Value::U(c.entry.instance.0)),
                        ("job", Value::U(job_id.0)),
                    ],
                );
                self.cache.take(c.slot);
                sent_jobs.insert(job_id);
                disk_remaining -= assignment.disk_bound_bytes as i128;
                queue_dur += e_scaled;
                rem_runtime -= e_scaled;
                rem_idle -= c.version.resource_usage.get(kind).copied().unwrap_or(0.0);
                self.dispatch_count += 1;
                self.skip_counts.remove(&job_id);
                self.debit(project, device_seconds);
                reply.jobs.push(assignment);
            }
        }
        reply
    }

    fn note_skip(
        &mut self,
        job: JobId,
        reason: SkipReason,
        host: crate::domain::HostId,
        now: SimTime,
        trace: &mut Trace,
    ) {
        *self.skip_counts.entry(job).or_insert(0) += 1;
        trace.emit(
            now,
            "skip",
            &[
                ("host", Value::U(host.0 as u64)),
                ("job", Value::U(job.0)),
                ("reason", Value::S(reason.tag().into())),
            ],
        );
    }
}
