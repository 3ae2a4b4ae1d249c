//! Weighted round-robin timeline simulation.
//!
//! Projects the current queue forward assuming the scheduler repeatedly runs
//! the highest-balance feasible set, and measures per-instance busy time,
//! buffer shortfall, deadline misses, and completion times. All arithmetic is
//! in integer milliseconds so results are exactly reproducible.

use std::collections::{BTreeMap, BTreeSet};

use crate::domain::{ComputingPrefs, Host, InstanceId, ProjectId, ResourceKind, SimTime};

use super::{estimate_remaining_scaled, ClientState};

/// Queue entry as the timeline simulation sees it.
#[derive(Debug, Clone)]
pub struct WrrJob {
    pub instance: InstanceId,
    pub project: ProjectId,
    /// Scaled wall-clock estimate to completion.
    pub remaining_ms: u64,
    /// Deadline relative to now; negative means already past.
    pub deadline_ms: i64,
    pub usage: BTreeMap<ResourceKind, f64>,
    pub est_wss_bytes: u64,
    /// FIFO tiebreaker within a project.
    pub seq: u64,
}

/// What the timeline simulation concluded.
#[derive(Debug, Clone, Default)]
pub struct WrrOutcome {
    /// Instances whose simulated completion lands past their deadline.
    pub miss: BTreeSet<InstanceId>,
    /// Per resource, per instance slot k: time within the horizon during
    /// which more than k units of the resource were in use.
    pub busy_ms: BTreeMap<ResourceKind, Vec<u64>>,
    /// Per resource: sum over instance slots of the unfilled portion of the
    /// high-water buffer.
    pub shortfall_ms: BTreeMap<ResourceKind, u64>,
    /// Simulated completion offset from now. `u64::MAX` marks a job that can
    /// never run on this host.
    pub completion_ms: BTreeMap<InstanceId, u64>,
    /// Instance slots idle in the first simulated step.
    pub idle_now: BTreeMap<ResourceKind, u32>,
}

/// Schedulable instance slots for a resource: physical count for GPUs, the
/// usable-CPU preference for the CPU.
pub fn slot_count(host: &Host, kind: &ResourceKind, prefs: &ComputingPrefs) -> u32 {
    match kind {
        ResourceKind::Cpu => (prefs.n_usable_cpus.round() as u32).max(1),
        ResourceKind::Gpu(_) => host.resource(kind).map_or(0, |r| r.instances),
    }
}

/// Deterministic consideration order: balance-descending, then project id,
/// then arrival order.
fn ordered_indices(jobs: &[WrrJob], priorities: &BTreeMap<ProjectId, f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..jobs.len()).collect();
    idx.sort_by(|&a, &b| {
        let pa = priorities.get(&jobs[a].project).copied().unwrap_or(0.0);
        let pb = priorities.get(&jobs[b].project).copied().unwrap_or(0.0);
        pb.total_cmp(&pa)
            .then_with(|| jobs[a].project.cmp(&jobs[b].project))
            .then_with(|| jobs[a].seq.cmp(&jobs[b].seq))
    });
    idx
}

/// Running capacity totals for greedy set construction.
struct Sums {
    cpu_only: f64,
    cpu_all: f64,
    wss: u64,
    gpu: BTreeMap<ResourceKind, f64>,
}

impl Sums {
    fn new() -> Self {
        Sums {
            cpu_only: 0.0,
            cpu_all: 0.0,
            wss: 0,
            gpu: BTreeMap::new(),
        }
    }

    fn admits(&self, job: &WrrJob, host: &Host, prefs: &ComputingPrefs) -> bool {
        let mut cpu = 0.0;
        let mut any_gpu = false;
        for (kind, amt) in &job.usage {
            match kind {
                ResourceKind::Cpu => cpu = *amt,
                ResourceKind::Gpu(_) => {
                    any_gpu = true;
                    let cap = slot_count(host, kind, prefs) as f64;
                    let cur = self.gpu.get(kind).copied().unwrap_or(0.0);
                    if cur + amt > cap + 1e-9 {
                        return false;
                    }
                }
            }
        }
        let usable = prefs.n_usable_cpus;
        if !any_gpu && self.cpu_only + cpu > usable + 1e-9 {
            return false;
        }
        if self.cpu_all + cpu > usable + 1.0 + 1e-9 {
            return false;
        }
        let budget = host.ram_bytes as f64 * prefs.max_ram_fraction;
        if (self.wss.saturating_add(job.est_wss_bytes)) as f64 > budget {
            return false;
        }
        true
    }

    fn add(&mut self, job: &WrrJob) {
        let mut any_gpu = false;
        for (kind, amt) in &job.usage {
            match kind {
                ResourceKind::Cpu => self.cpu_all += amt,
                ResourceKind::Gpu(_) => {
                    any_gpu = true;
                    *self.gpu.entry(kind.clone()).or_insert(0.0) += amt;
                }
            }
        }
        if !any_gpu {
            self.cpu_only += job.usage.get(&ResourceKind::Cpu).copied().unwrap_or(0.0);
        }
        self.wss = self.wss.saturating_add(job.est_wss_bytes);
    }
}

/// Simulate the queue forward and measure buffer fill and deadline misses.
///
/// Busy time is accumulated only within `horizon_ms`; completions are
/// simulated to the end of the queue regardless. `horizon_ms` must be at
/// least `b_hi_ms` or shortfall would be overstated.
pub fn wrr_simulate(
    jobs: &[WrrJob],
    host: &Host,
    prefs: &ComputingPrefs,
    priorities: &BTreeMap<ProjectId, f64>,
    b_hi_ms: u64,
    horizon_ms: u64,
) -> WrrOutcome {
    debug_assert!(horizon_ms >= b_hi_ms);
    let mut out = WrrOutcome::default();
    for r in &host.resources {
        let n = slot_count(host, &r.kind, prefs) as usize;
        out.busy_ms.insert(r.kind.clone(), vec![0; n]);
    }

    let order = ordered_indices(jobs, priorities);
    let mut remaining: Vec<u64> = jobs.iter().map(|j| j.remaining_ms).collect();
    let mut done = vec![false; jobs.len()];
    for (i, j) in jobs.iter().enumerate() {
        let alone = Sums::new().admits(j, host, prefs);
        if !alone {
            done[i] = true;
            out.completion_ms.insert(j.instance, u64::MAX);
            out.miss.insert(j.instance);
        } else if remaining[i] == 0 {
            done[i] = true;
            out.completion_ms.insert(j.instance, 0);
            if j.deadline_ms < 0 {
                out.miss.insert(j.instance);
            }
        }
    }

    let mut t: u64 = 0;
    let mut first_step = true;
    loop {
        let mut sums = Sums::new();
        let mut active: Vec<usize> = Vec::new();
        for &i in &order {
            if !done[i] && sums.admits(&jobs[i], host, prefs) {
                sums.add(&jobs[i]);
                active.push(i);
            }
        }
        if first_step {
            for r in &host.resources {
                let n = slot_count(host, &r.kind, prefs);
                let used: f64 = active
                    .iter()
                    .map(|&i| jobs[i].usage.get(&r.kind).copied().unwrap_or(0.0))
                    .sum();
                let busy = (used - 1e-9).ceil().max(0.0) as u32;
                out.idle_now.insert(r.kind.clone(), n.saturating_sub(busy));
            }
            first_step = false;
        }
        if active.is_empty() {
            break;
        }
        let dt = active.iter().map(|&i| remaining[i]).min().unwrap();
        if t < horizon_ms {
            let span = dt.min(horizon_ms - t);
            for (kind, levels) in out.busy_ms.iter_mut() {
                let used: f64 = active
                    .iter()
                    .map(|&i| jobs[i].usage.get(kind).copied().unwrap_or(0.0))
                    .sum();
                for (k, slot) in levels.iter_mut().enumerate() {
                    if used > k as f64 + 1e-9 {
                        *slot += span;
                    }
                }
            }
        }
        t += dt;
        for &i in &active {
            remaining[i] -= dt;
            if remaining[i] == 0 {
                done[i] = true;
                out.completion_ms.insert(jobs[i].instance, t);
                if (t as i64) > jobs[i].deadline_ms {
                    out.miss.insert(jobs[i].instance);
                }
            }
        }
    }

    for (kind, levels) in &out.busy_ms {
        let short: u64 = levels.iter().map(|&b| b_hi_ms.saturating_sub(b)).sum();
        out.shortfall_ms.insert(kind.clone(), short);
    }
    out
}

impl ClientState {
    /// Build timeline inputs from the live queue: scaled remaining
    /// estimates, relative deadlines, current balances as priorities.
    pub fn wrr_inputs(&self, now: SimTime) -> (Vec<WrrJob>, BTreeMap<ProjectId, f64>) {
        let jobs = self
            .jobs
            .iter()
            .map(|j| WrrJob {
                instance: j.instance,
                project: j.project,
                remaining_ms: SimTime::from_secs_f64(estimate_remaining_scaled(
                    j,
                    self.availability,
                    self.prefs.throttle_duty_cycle,
                ))
                .as_millis(),
                deadline_ms: j.deadline.as_millis() as i64 - now.as_millis() as i64,
                usage: j.usage.clone(),
                est_wss_bytes: j.est_wss_bytes,
                seq: j.arrival_seq,
            })
            .collect();
        let priorities = self
            .alloc
            .iter()
            .map(|(p, a)| (*p, a.balance))
            .collect();
        (jobs, priorities)
    }

    /// Timeline simulation over the live queue out to the high-water buffer.
    pub fn wrr(&self, host: &Host, now: SimTime) -> WrrOutcome {
        let (jobs, priorities) = self.wrr_inputs(now);
        let b_hi_ms = SimTime::from_secs_f64(self.prefs.buffer_hi_seconds).as_millis();
        wrr_simulate(&jobs, host, &self.prefs, &priorities, b_hi_ms, b_hi_ms)
    }
}
