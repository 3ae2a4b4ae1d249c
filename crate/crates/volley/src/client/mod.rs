//! Client-side state: the job queue, runtime estimation, feasibility of a
//! candidate run set, allocation balances, backoff, and pending reports.
//!
//! The scheduling passes themselves live in the submodules: [`wrr`] for the
//! weighted round-robin timeline simulation, [`schedule`] for picking the run
//! set, [`fetch`] for work-fetch and report policy.

pub mod fetch;
pub mod schedule;
pub mod wrr;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{
    AllocationState, AppVersionId, ComputingPrefs, Host, HostId, InstanceId, JobId, ProjectId,
    ResourceKind, SimTime,
};
use crate::validation::Digest;

/// Availability EWMA half-life: 10 days.
pub const AVAILABILITY_HALF_LIFE_SECS: f64 = 10.0 * 86_400.0;

/// Execution state of a job on the client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    /// Never run.
    Unstarted,
    Running,
    /// Paused but resident; resumes with full progress.
    SuspendedInMemory,
    /// Evicted from memory; progress equals the last checkpoint.
    Preempted,
}

/// One job instance held by a client, with everything the scheduler needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientJob {
    pub instance: InstanceId,
    pub job: JobId,
    pub project: ProjectId,
    pub app_version: AppVersionId,
    /// Instance counts consumed per resource, from the app version.
    pub usage: BTreeMap<ResourceKind, f64>,
    pub est_wss_bytes: u64,
    pub disk_bound_bytes: u64,
    /// Server-estimated total runtime in raw compute-seconds (no
    /// availability or throttle scaling).
    pub static_total_raw: f64,
    pub fraction_done: f64,
    /// Whether fraction_done can be trusted outright for the dynamic
    /// estimate, instead of being blended with the static one.
    pub accurate_fraction: bool,
    /// Compute-seconds actually spent, i.e. wall time running times the
    /// throttle duty cycle.
    pub elapsed_raw: f64,
    pub deadline: SimTime,
    pub received: SimTime,
    /// FIFO tiebreaker: position in arrival order at this client.
    pub arrival_seq: u64,
    pub state: RunState,
    /// True until the first checkpoint is written.
    pub never_checkpointed: bool,
    /// When the current timeslice began (meaningful while running).
    pub slice_started: SimTime,
    pub last_checkpoint: Option<SimTime>,
    /// Set when the scheduler wants this job off the device but is waiting
    /// for its next checkpoint to avoid losing progress.
    pub preempt_pending: bool,
}

impl ClientJob {
    pub fn uses_gpu(&self) -> bool {
        self.usage
            .keys()
            .any(|k| matches!(k, ResourceKind::Gpu(_)))
    }

    pub fn cpu_usage(&self) -> f64 {
        self.usage.get(&ResourceKind::Cpu).copied().unwrap_or(0.0)
    }

    pub fn is_running(&self) -> bool {
        self.state == RunState::Running
    }

    /// Delay bound this instance was issued under.
    pub fn delay_bound_secs(&self) -> f64 {
        self.deadline.saturating_sub(self.received).as_secs_f64()
    }
}

/// Remaining runtime estimate in raw compute-seconds.
///
/// Unstarted jobs use the static estimate. Started jobs blend a dynamic
/// estimate (extrapolated from elapsed time and fraction done) with the
/// static remainder, weighted by fraction done, unless the app reports
/// accurate fractions, in which case the dynamic estimate is used alone.
pub fn estimate_remaining_raw(job: &ClientJob) -> f64 {
    let f = job.fraction_done.clamp(0.0, 1.0);
    if f >= 1.0 {
        return 0.0;
    }
    let static_rem = job.static_total_raw * (1.0 - f);
    if f <= 0.0 || job.elapsed_raw <= 0.0 {
        return static_rem;
    }
    let dynamic = job.elapsed_raw * (1.0 - f) / f;
    if job.accurate_fraction {
        dynamic
    } else {
        f * dynamic + (1.0 - f) * static_rem
    }
}

/// Remaining estimate scaled to expected wall-clock seconds: raw divided by
/// the availability fraction and the throttle duty cycle.
pub fn estimate_remaining_scaled(job: &ClientJob, availability: f64, duty_cycle: f64) -> f64 {
    let denom = (availability * duty_cycle).max(1e-9);
    estimate_remaining_raw(job) / denom
}

/// Can this set of jobs run together on the host?
///
/// Checks, in order: per-GPU-kind instance sums, CPU usage of CPU-only jobs
/// against the usable CPU count, CPU usage of all jobs against usable + 1
/// (GPU feeder threads may oversubscribe slightly), and total working-set
/// size against the RAM budget.
pub fn feasible(jobs: &[&ClientJob], host: &Host, prefs: &ComputingPrefs) -> bool {
    let mut gpu_sums: BTreeMap<&ResourceKind, f64> = BTreeMap::new();
    let mut cpu_only = 0.0;
    let mut cpu_all = 0.0;
    let mut wss: u64 = 0;
    for j in jobs {
        for (kind, amt) in &j.usage {
            match kind {
                ResourceKind::Cpu => cpu_all += amt,
                ResourceKind::Gpu(_) => *gpu_sums.entry(kind).or_insert(0.0) += amt,
            }
        }
        if !j.uses_gpu() {
            cpu_only += j.cpu_usage();
        }
        wss = wss.saturating_add(j.est_wss_bytes);
    }
    for (kind, sum) in gpu_sums {
        let cap = host.resource(kind).map_or(0, |r| r.instances);
        if sum > cap as f64 + 1e-9 {
            return false;
        }
    }
    if cpu_only > prefs.n_usable_cpus + 1e-9 {
        return false;
    }
    if cpu_all > prefs.n_usable_cpus + 1.0 + 1e-9 {
        return false;
    }
    let ram_budget = host.ram_bytes as f64 * prefs.max_ram_fraction;
    if wss as f64 > ram_budget {
        return false;
    }
    true
}

/// Exponential backoff bookkeeping for one project.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct BackoffState {
    pub consecutive_failures: u32,
    pub next_allowed: SimTime,
}

/// A finished instance waiting to be reported to its project.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PendingReport {
    pub instance: InstanceId,
    pub job: JobId,
    pub project: ProjectId,
    pub app_version: AppVersionId,
    pub success: bool,
    pub digest: Option<Digest>,
    /// Raw compute-seconds consumed, as the client would report them.
    pub runtime_raw: f64,
    pub finished_at: SimTime,
    /// Latest time the report can wait before risking the deadline; past
    /// this an RPC is forced.
    pub report_by: SimTime,
}

/// All per-client state the scheduler and fetch policy operate on.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub host: HostId,
    pub prefs: ComputingPrefs,
    pub jobs: Vec<ClientJob>,
    pub alloc: BTreeMap<ProjectId, AllocationState>,
    pub backoff: BTreeMap<ProjectId, BackoffState>,
    pub pending_reports: Vec<PendingReport>,
    /// EWMA of the fraction of time the host is on.
    pub availability: f64,
    availability_updated: SimTime,
    arrival_counter: u64,
    /// Basis for allocation accounting: last time balances were advanced.
    last_account: SimTime,
}

impl ClientState {
    pub fn new(host: HostId, prefs: ComputingPrefs, projects: &[(ProjectId, f64)]) -> Self {
        let cap = 86_400.0; // one day of imbalance, either direction
        let total: f64 = projects.iter().map(|(_, share)| share).sum();
        let alloc = projects
            .iter()
            .map(|(p, share)| {
                let rate = if total > 0.0 { share / total } else { 0.0 };
                (*p, AllocationState::new(rate, cap))
            })
            .collect();
        ClientState {
            host,
            prefs,
            jobs: Vec::new(),
            alloc,
            backoff: BTreeMap::new(),
            pending_reports: Vec::new(),
            availability: 1.0,
            availability_updated: SimTime::ZERO,
            arrival_counter: 0,
            last_account: SimTime::ZERO,
        }
    }

    pub fn next_arrival_seq(&mut self) -> u64 {
        let s = self.arrival_counter;
        self.arrival_counter += 1;
        s
    }

    pub fn job(&self, instance: InstanceId) -> Option<&ClientJob> {
        self.jobs.iter().find(|j| j.instance == instance)
    }

    pub fn job_mut(&mut self, instance: InstanceId) -> Option<&mut ClientJob> {
        self.jobs.iter_mut().find(|j| j.instance == instance)
    }

    pub fn remove_job(&mut self, instance: InstanceId) -> Option<ClientJob> {
        let idx = self.jobs.iter().position(|j| j.instance == instance)?;
        Some(self.jobs.remove(idx))
    }

    pub fn balance(&self, project: ProjectId) -> f64 {
        self.alloc.get(&project).map_or(0.0, |a| a.balance)
    }

    /// Fold one on/off segment ending at `now` into the availability EWMA.
    pub fn note_availability_segment(&mut self, now: SimTime, was_on: bool) {
        let dt = now.saturating_sub(self.availability_updated).as_secs_f64();
        if dt > 0.0 {
            let w = 0.5_f64.powf(dt / AVAILABILITY_HALF_LIFE_SECS);
            let target = if was_on { 1.0 } else { 0.0 };
            self.availability = self.availability * w + target * (1.0 - w);
        }
        self.availability_updated = now;
    }

    /// Advance allocation balances to `now` given the compute delivered to
    /// each project since the last call, in device-seconds (instance-count
    /// weighted wall seconds on this host).
    pub fn account_usage(&mut self, now: SimTime, delivered: &BTreeMap<ProjectId, f64>) {
        let elapsed = now.saturating_sub(self.last_account).as_secs_f64();
        self.last_account = now;
        if elapsed <= 0.0 {
            return;
        }
        let total_rate: f64 = delivered.values().sum::<f64>() / elapsed;
        for (project, state) in self.alloc.iter_mut() {
            let used = delivered.get(project).copied().unwrap_or(0.0);
            crate::domain::linear_bounded_update(state, elapsed, total_rate, used);
        }
    }
}
