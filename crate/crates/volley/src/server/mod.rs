//! Server-side state: the job store, shared cache, runtime and credit
//! statistics, and the RPC entry point. The dispatch pipeline itself lives
//! in [`dispatch`], speed statistics in [`stats`], the cache and feeder in
//! [`cache`].

pub mod cache;
pub mod dispatch;
pub mod stats;

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::credit::{claimed_credit, granted_credit, pfc, RecentAverage};
use crate::domain::{
    AllocationState, AppId, AppVersion, AppVersionId, Host, HostId, HrLevel, InstanceId, JobId,
    JobSpec, ProjectId, ResourceKind, SimTime,
};
use crate::lifecycle::{
    self, create_job, InstanceIds, Job, JobState, ReportOutcome, SpecError,
};
use crate::trace::{Trace, Value};
use crate::validation::ReplicationStats;
use cache::{Backlog, CachedEntry, JobCache};
use stats::RuntimeStats;

/// Scoring weights; the factors are fixed, the weights are policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreWeights {
    pub keyword: f64,
    pub alloc: f64,
    pub skip: f64,
    pub locality: f64,
    pub size: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        ScoreWeights {
            keyword: 1.0,
            alloc: 1.0,
            skip: 0.25,
            locality: 2.0,
            size: 0.5,
        }
    }
}

/// Server-side policy switches, each overridable from the scenario config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerPolicy {
    pub hr_level: HrLevel,
    /// Lock each job to the app version of its first dispatch.
    pub homogeneous_version: bool,
    /// Skip replication for jobs first dispatched to proven (host, version)
    /// pairs.
    pub adaptive_replication: bool,
    /// Consecutive-valid threshold for adaptive replication.
    pub adaptive_k: u32,
    /// Count deadline misses toward max_error_instances.
    pub timeout_counts_as_error: bool,
    pub score_weights: ScoreWeights,
    pub cache_slots: usize,
    /// Terminal jobs are purged this long after settling.
    pub purge_grace_seconds: f64,
}

impl Default for ServerPolicy {
    fn default() -> Self {
        ServerPolicy {
            hr_level: HrLevel::None,
            homogeneous_version: false,
            adaptive_replication: false,
            adaptive_k: 10,
            timeout_counts_as_error: false,
            score_weights: ScoreWeights::default(),
            cache_slots: cache::DEFAULT_CACHE_SLOTS,
            purge_grace_seconds: 86_400.0,
        }
    }
}

/// Per-app configuration the server needs at dispatch and validation time.
#[derive(Debug, Clone)]
pub struct AppPolicy {
    pub id: AppId,
    pub project: ProjectId,
    pub comparator: crate::validation::Comparator,
    pub versions: Vec<AppVersion>,
    pub keywords: BTreeSet<String>,
}

/// One finished instance coming back from a client.
#[derive(Debug, Clone)]
pub struct InstanceReport {
    pub job: JobId,
    pub instance: InstanceId,
    pub outcome: ReportOutcome,
}

/// Everything a client sends in one RPC.
#[derive(Debug, Clone)]
pub struct RpcRequest {
    pub host: Host,
    /// Client's availability estimate, used to scale runtime to wall clock.
    pub availability: f64,
    pub duty_cycle: f64,
    pub reports: Vec<InstanceReport>,
    pub work: Option<crate::client::fetch::WorkRequest>,
}

/// One job handed to a client: the instance, the version to run, and the
/// server's size and runtime estimates.
#[derive(Debug, Clone)]
pub struct JobAssignment {
    pub job: JobId,
    pub instance: InstanceId,
    pub app: AppId,
    pub project: ProjectId,
    pub version: AppVersionId,
    pub usage: BTreeMap<ResourceKind, f64>,
    pub est_flop_count: f64,
    /// Raw-seconds runtime projection for this host.
    pub est_runtime_raw: f64,
    pub est_wss_bytes: u64,
    pub disk_bound_bytes: u64,
    pub delay_bound_seconds: f64,
    pub deadline: SimTime,
}

#[derive(Debug, Clone, Default)]
pub struct RpcReply {
    pub jobs: Vec<JobAssignment>,
}

/// Credit paid out so far.
#[derive(Debug, Clone, Default)]
pub struct CreditLedger {
    pub by_host: BTreeMap<HostId, f64>,
    pub by_project: BTreeMap<ProjectId, f64>,
    pub recent_by_host: BTreeMap<HostId, RecentAverage>,
}

pub const RECENT_CREDIT_HALF_LIFE_DAYS: f64 = 7.0;

pub struct ServerState {
    pub policy: ServerPolicy,
    pub apps: BTreeMap<AppId, AppPolicy>,
    pub jobs: BTreeMap<JobId, Job>,
    pub hosts: BTreeMap<HostId, Host>,
    pub cache: JobCache,
    pub backlog: Backlog,
    pub stats: RuntimeStats,
    pub repl: ReplicationStats,
    pub pfc: crate::credit::PfcStats,
    pub credit: CreditLedger,
    pub dispatch_count: u64,
    alloc: BTreeMap<ProjectId, AllocationState>,
    pending_debits: BTreeMap<ProjectId, f64>,
    alloc_advanced: SimTime,
    skip_counts: BTreeMap<JobId, u32>,
    next_job_id: u64,
    instance_ids: InstanceIds,
    rng: ChaCha12Rng,
    /// Per-version speed tercile boundaries over known hosts, refreshed
    /// daily.
    terciles: BTreeMap<AppVersionId, (f64, f64)>,
    terciles_computed: Option<SimTime>,
}

impl ServerState {
    pub fn new(
        policy: ServerPolicy,
        apps: Vec<AppPolicy>,
        project_shares: &[(ProjectId, f64)],
        rng: ChaCha12Rng,
    ) -> Self {
        let total: f64 = project_shares.iter().map(|(_, s)| s).sum();
        let cap = 86_400.0;
        let alloc = project_shares
            .iter()
            .map(|(p, share)| {
                let rate = if total > 0.0 { share / total } else { 0.0 };
                (*p, AllocationState::new(rate, cap))
            })
            .collect();
        let cache = JobCache::new(policy.cache_slots);
        ServerState {
            apps: apps.into_iter().map(|a| (a.id, a)).collect(),
            jobs: BTreeMap::new(),
            hosts: BTreeMap::new(),
            cache,
            backlog: Backlog::default(),
            stats: RuntimeStats::default(),
            repl: ReplicationStats::default(),
            pfc: crate::credit::PfcStats::default(),
            credit: CreditLedger::default(),
            dispatch_count: 0,
            alloc,
            pending_debits: BTreeMap::new(),
            alloc_advanced: SimTime::ZERO,
            skip_counts: BTreeMap::new(),
            next_job_id: 1,
            instance_ids: InstanceIds::default(),
            rng,
            terciles: BTreeMap::new(),
            terciles_computed: None,
            policy,
        }
    }

    pub fn app(&self, id: AppId) -> &AppPolicy {
        self.apps.get(&id).expect("app registered")
    }

    pub fn version_of(&self, app: AppId, version: AppVersionId) -> &AppVersion {
        self.app(app)
            .versions
            .iter()
            .find(|v| v.id == version)
            .expect("version registered")
    }

    pub fn register_host(&mut self, host: Host) {
        self.hosts.insert(host.id, host);
    }

    pub fn normalized_balance(&self, project: ProjectId) -> f64 {
        self.alloc
            .get(&project)
            .map_or(0.0, |a| if a.cap > 0.0 { a.balance / a.cap } else { 0.0 })
    }

    /// Create a job and queue its instances for the feeder.
    pub fn submit_job(
        &mut self,
        spec: JobSpec,
        now: SimTime,
        trace: &mut Trace,
    ) -> Result<JobId, SpecError> {
        let id = JobId(self.next_job_id);
        let job = create_job(id, spec, now, &mut self.instance_ids)?;
        self.next_job_id += 1;
        trace.emit(
            now,
            "job_created",
            &[
                ("job", Value::U(id.0)),
                ("app", Value::U(job.spec.app.0 as u64)),
                ("project", Value::U(job.spec.submitter.0 as u64)),
                ("quorum", Value::U(job.min_quorum as u64)),
                ("instances", Value::U(job.instances.len() as u64)),
            ],
        );
        let category = (job.hr_class_lock, job.spec.size_class);
        for inst in &job.instances {
            self.backlog.push(
                category,
                CachedEntry {
                    job: id,
                    instance: inst.id,
                },
            );
        }
        self.jobs.insert(id, job);
        Ok(id)
    }

    /// Refill the cache from the backlog, skipping entries that died while
    /// queued (cancelled instances, terminal jobs).
    pub fn feeder_tick(&mut self) -> usize {
        let jobs = &self.jobs;
        cache::feeder_fill(&mut self.cache, &mut self.backlog, |entry| {
            jobs.get(&entry.job).is_some_and(|job| {
                !job.is_terminal()
                    && job
                        .instance(entry.instance)
                        .is_some_and(|i| i.state == lifecycle::InstanceState::Unsent)
            })
        })
    }

    /// Advance allocation balances to `now`, folding in dispatch debits
    /// accumulated since the last advance.
    fn advance_alloc(&mut self, now: SimTime) {
        let elapsed = now.saturating_sub(self.alloc_advanced).as_secs_f64();
        self.alloc_advanced = now;
        if elapsed <= 0.0 {
            // Same-instant calls: apply debits directly so nothing is lost.
            for (p, used) in std::mem::take(&mut self.pending_debits) {
                if let Some(a) = self.alloc.get_mut(&p) {
                    a.balance = (a.balance - used).clamp(-a.cap, a.cap);
                }
            }
            return;
        }
        let debits = std::mem::take(&mut self.pending_debits);
        let total_rate: f64 = debits.values().sum::<f64>() / elapsed;
        for (project, state) in self.alloc.iter_mut() {
            let used = debits.get(project).copied().unwrap_or(0.0);
            crate::domain::linear_bounded_update(state, elapsed, total_rate, used);
        }
    }

    fn debit(&mut self, project: ProjectId, device_seconds: f64) {
        *self.pending_debits.entry(project).or_insert(0.0) += device_seconds;
    }

    /// Process one deadline expiry. Returns true when the instance actually
    /// timed out (it had not reported).
    pub fn on_instance_deadline(
        &mut self,
        job_id: JobId,
        instance: InstanceId,
        now: SimTime,
        trace: &mut Trace,
    ) -> bool {
        let Some(job) = self.jobs.get_mut(&job_id) else {
            return false;
        };
        let host = job.instance(instance).and_then(|i| i.host);
        if !lifecycle::on_deadline(job, instance, now) {
            return false;
        }
        trace.emit(
            now,
            "instance_timeout",
            &[
                ("job", Value::U(job_id.0)),
                ("instance", Value::U(instance.0)),
                ("host", Value::U(host.map_or(0, |h| h.0 as u64))),
            ],
        );
        self.run_transition(job_id, now, trace);
        true
    }

    /// Apply one client report and let the job react.
    pub fn handle_report(&mut self, report: &InstanceReport, now: SimTime, trace: &mut Trace) {
        let Some(job) = self.jobs.get_mut(&report.job) else {
            return;
        };
        let host = job.instance(report.instance).and_then(|i| i.host);
        let (outcome_tag, runtime) = match &report.outcome {
            ReportOutcome::Success { runtime, .. } => ("success", *runtime),
            ReportOutcome::Error => ("error", 0.0),
        };
        if !lifecycle::on_report(job, report.instance, report.outcome.clone()) {
            return;
        }
        trace.emit(
            now,
            "instance_reported",
            &[
                ("job", Value::U(report.job.0)),
                ("instance", Value::U(report.instance.0)),
                ("host", Value::U(host.map_or(0, |h| h.0 as u64))),
                ("outcome", Value::S(outcome_tag.into())),
                ("runtime", Value::F(runtime)),
            ],
        );
        self.run_transition(report.job, now, trace);
    }

    /// Run the state machine for one job and absorb the effects: statistics
    /// for validated instances, credit on canonical choice, replacement
    /// instances into the backlog, terminal records into the trace.
    pub fn run_transition(&mut self, job_id: JobId, now: SimTime, trace: &mut Trace) {
        let Some(job) = self.jobs.get_mut(&job_id) else {
            return;
        };
        if !job.needs_transition {
            return;
        }
        let comparator = self
            .apps
            .get(&job.spec.app)
            .map(|a| a.comparator)
            .unwrap_or_default();
        let fx = lifecycle::transition(
            job,
            comparator,
            now,
            self.policy.timeout_counts_as_error,
            &mut self.instance_ids,
        );

        // Snapshot what the stats updates need before releasing the borrow.
        struct Validated {
            valid: bool,
            host: HostId,
            version: AppVersionId,
            runtime: f64,
        }
        let validated: Vec<Validated> = fx
            .newly_validated
            .iter()
            .filter_map(|&(id, valid)| {
                let inst = job.instance(id)?;
                Some(Validated {
                    valid,
                    host: inst.host?,
                    version: inst.app_version?,
                    runtime: inst.reported_runtime,
                })
            })
            .collect();
        let app = job.spec.app;
        let est_flop = job.spec.est_flop_count;
        let created = fx.created.clone();
        let category = (job.hr_class_lock, job.spec.size_class);
        let prior_grant = job.granted;

        for v in &validated {
            trace.emit(
                now,
                "instance_validated",
                &[
                    ("job", Value::U(job_id.0)),
                    ("host", Value::U(v.host.0 as u64)),
                    ("valid", Value::U(v.valid as u64)),
                ],
            );
            self.repl.record_validation(v.host, v.version, v.valid);
            if v.valid {
                self.stats.record(v.host, v.version, v.runtime, est_flop);
                let version = self.version_of(app, v.version).clone();
                if let Some(host) = self.hosts.get(&v.host) {
                    let p = pfc(v.runtime, &version, host);
                    self.pfc.record_validated(v.host, v.version, p.flops, est_flop);
                }
            }
        }

        if fx.quorum_checked {
            match fx.canonical_found {
                Some(canonical) => trace.emit(
                    now,
                    "quorum_reached",
                    &[
                        ("job", Value::U(job_id.0)),
                        ("canonical", Value::U(canonical.0)),
                    ],
                ),
                None => trace.emit(now, "quorum_failed", &[("job", Value::U(job_id.0))]),
            }
        }

        // Credit: computed once when the canonical instance is chosen, and
        // paid again to any instance validated later.
        let grant = if fx.canonical_found.is_some() {
            let version_ids: Vec<AppVersionId> =
                self.app(app).versions.iter().map(|v| v.id).collect();
            let claims: Vec<f64> = validated
                .iter()
                .filter(|v| v.valid)
                .filter_map(|v| {
                    let version = self.version_of(app, v.version).clone();
                    let host = self.hosts.get(&v.host)?;
                    let p = pfc(v.runtime, &version, host);
                    Some(claimed_credit(
                        p.flops,
                        &self.pfc,
                        v.host,
                        v.version,
                        &version_ids,
                    ))
                })
                .collect();
            if claims.is_empty() {
                None
            } else {
                let g = granted_credit(&claims);
                trace.emit(
                    now,
                    "credit_granted",
                    &[("amount", Value::F(g)), ("job", Value::U(job_id.0))],
                );
                Some(g)
            }
        } else {
            prior_grant
        };
        if let Some(g) = grant {
            if let Some(job) = self.jobs.get_mut(&job_id) {
                job.granted = Some(g);
            }
            let project = self.app(app).project;
            for v in validated.iter().filter(|v| v.valid) {
                *self.credit.by_host.entry(v.host).or_insert(0.0) += g;
                *self.credit.by_project.entry(project).or_insert(0.0) += g;
                self.credit
                    .recent_by_host
                    .entry(v.host)
                    .or_insert_with(|| RecentAverage::new(RECENT_CREDIT_HALF_LIFE_DAYS))
                    .add(now, g);
            }
        }

        for inst in created {
            self.backlog.push(
                category,
                CachedEntry {
                    job: job_id,
                    instance: inst,
                },
            );
        }

        if let Some(state) = fx.newly_terminal {
            match state {
                JobState::Success { canonical } => trace.emit(
                    now,
                    "job_success",
                    &[
                        ("canonical", Value::U(canonical.0)),
                        ("job", Value::U(job_id.0)),
                    ],
                ),
                JobState::Failed { reason } => trace.emit(
                    now,
                    "job_failed",
                    &[
                        ("job", Value::U(job_id.0)),
                        (
                            "reason",
                            Value::S(
                                match reason {
                                    lifecycle::FailReason::TooManyErrors => "too_many_errors",
                                    lifecycle::FailReason::Nondeterministic => "nondeterministic",
                                }
                                .into(),
                            ),
                        ),
                    ],
                ),
                JobState::Active => {}
            }
        }
    }

    /// Drop settled jobs whose grace period has passed.
    pub fn purge_pass(&mut self, now: SimTime, trace: &mut Trace) -> Vec<JobId> {
        let grace = self.policy.purge_grace_seconds;
        let purged: Vec<JobId> = self
            .jobs
            .values()
            .filter(|j| lifecycle::purge_eligible(j, grace, now))
            .map(|j| j.id)
            .collect();
        for id in &purged {
            self.jobs.remove(id);
            self.skip_counts.remove(id);
            trace.emit(now, "job_purged", &[("job", Value::U(id.0))]);
        }
        purged
    }
}
