//! Run-set selection: which queued jobs execute right now.
//!
//! The pass runs the timeline simulation to find deadline trouble, orders
//! candidates, then greedily builds a maximal feasible set. Running jobs that
//! fall out of the set are suspended in memory if they checkpointed recently,
//! otherwise they keep the device until their next checkpoint so no progress
//! is thrown away.

use std::collections::BTreeSet;

use crate::domain::{Host, InstanceId, SimTime};

use super::{feasible, ClientState, RunState};

/// How long a job ideally keeps the device once started.
pub const TIMESLICE_SECS: f64 = 3600.0;

/// Apps checkpoint on this cadence.
pub const CHECKPOINT_INTERVAL_SECS: f64 = 600.0;

/// Output of one scheduling pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SchedulePlan {
    /// Selected run set, in selection order.
    pub run: Vec<InstanceId>,
    /// Subset of `run` that was not already running.
    pub start: Vec<InstanceId>,
    /// Running jobs to suspend in memory immediately.
    pub preempt_now: Vec<InstanceId>,
    /// Running jobs that keep the device until their next checkpoint, then
    /// get evicted.
    pub preempt_at_checkpoint: Vec<InstanceId>,
}

fn checkpointed_recently(job: &super::ClientJob, now: SimTime) -> bool {
    job.last_checkpoint.is_some_and(|ck| {
        now.saturating_sub(ck).as_secs_f64() <= CHECKPOINT_INTERVAL_SECS
    })
}

/// True when preempting this job would interrupt work it wants to finish
/// first: it is mid-timeslice or has never written a checkpoint.
fn holds_device(job: &super::ClientJob, now: SimTime) -> bool {
    job.is_running()
        && (now.saturating_sub(job.slice_started).as_secs_f64() < TIMESLICE_SECS
            || job.never_checkpointed)
}

/// Pick the run set.
///
/// Candidates are ordered by, in turn: projected deadline misses in deadline
/// order (only when `edf_enabled`), GPU jobs before CPU jobs, running jobs
/// that are mid-timeslice or never checkpointed, larger CPU footprints,
/// higher project balance, and finally arrival order. The feasible set is
/// built greedily over the full ordering, so it is maximal: no skipped job
/// could be added without breaking feasibility.
pub fn schedule(
    state: &ClientState,
    host: &Host,
    now: SimTime,
    edf_enabled: bool,
) -> SchedulePlan {
    let miss: BTreeSet<InstanceId> = if edf_enabled {
        state.wrr(host, now).miss
    } else {
        BTreeSet::new()
    };

    let mut order: Vec<usize> = (0..state.jobs.len()).collect();
    order.sort_by(|&ia, &ib| {
        let a = &state.jobs[ia];
        let b = &state.jobs[ib];
        if edf_enabled {
            let am = miss.contains(&a.instance);
            let bm = miss.contains(&b.instance);
            if am != bm {
                return bm.cmp(&am); // misses first
            }
            if am && bm && a.deadline != b.deadline {
                return a.deadline.cmp(&b.deadline);
            }
        }
        (b.uses_gpu().cmp(&a.uses_gpu()))
            .then_with(|| holds_device(b, now).cmp(&holds_device(a, now)))
            .then_with(|| b.cpu_usage().total_cmp(&a.cpu_usage()))
            .then_with(|| {
                state
                    .balance(b.project)
                    .total_cmp(&state.balance(a.project))
            })
            .then_with(|| a.arrival_seq.cmp(&b.arrival_seq))
    });

    let mut plan = SchedulePlan::default();
    let mut selected: Vec<&super::ClientJob> = Vec::new();
    let mut selected_idx: BTreeSet<usize> = BTreeSet::new();
    for &i in &order {
        let job = &state.jobs[i];
        let mut trial = selected.clone();
        trial.push(job);
        if feasible(&trial, host, &state.prefs) {
            selected = trial;
            selected_idx.insert(i);
            plan.run.push(job.instance);
            if !job.is_running() {
                plan.start.push(job.instance);
            }
        }
    }

    for (i, job) in state.jobs.iter().enumerate() {
        if job.is_running() && !selected_idx.contains(&i) {
            if checkpointed_recently(job, now) {
                plan.preempt_now.push(job.instance);
            } else {
                plan.preempt_at_checkpoint.push(job.instance);
            }
        }
    }
    plan
}

/// Apply a plan to the queue state. The caller (the simulation engine or a
/// real client loop) is responsible for moving actual execution progress;
/// this only flips run states and slice bookkeeping.
pub fn apply_schedule(state: &mut ClientState, plan: &SchedulePlan, now: SimTime) {
    for inst in &plan.run {
        if let Some(job) = state.job_mut(*inst) {
            job.preempt_pending = false;
            if job.state != RunState::Running {
                job.state = RunState::Running;
                job.slice_started = now;
            }
        }
    }
    for inst in &plan.preempt_now {
        if let Some(job) = state.job_mut(*inst) {
            if job.state == RunState::Running {
                job.state = RunState::SuspendedInMemory;
                job.preempt_pending = false;
            }
        }
    }
    for inst in &plan.preempt_at_checkpoint {
        if let Some(job) = state.job_mut(*inst) {
            if job.state == RunState::Running {
                job.preempt_pending = true;
            }
        }
    }
}

/// Record a checkpoint for a running job. Returns true when the job was
/// waiting on this checkpoint to vacate the device and has now been evicted.
pub fn on_checkpoint(state: &mut ClientState, instance: InstanceId, now: SimTime) -> bool {
    let Some(job) = state.job_mut(instance) else {
        return false;
    };
    if job.state != RunState::Running {
        return false;
    }
    job.last_checkpoint = Some(now);
    job.never_checkpointed = false;
    if job.preempt_pending {
        job.state = RunState::Preempted;
        job.preempt_pending = false;
        true
    } else {
        false
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::domain::{
        AppVersionId, ComputingPrefs, HostId, JobId, ProcessingResource, ProjectId,
        ReliabilityProfile, ResourceKind,
    };
    use proptest::prelude::*;

    fn host(cpus: u32, gpus: u32) -> Host {
        let mut resources = vec![ProcessingResource {
            kind: ResourceKind::Cpu,
            instances: cpus,
            peak_flops: 1e9,
            availability: 1.0,
            driver_version: 0,
        }];
        if gpus > 0 {
            resources.push(ProcessingResource {
                kind: ResourceKind::Gpu("nv".into()),
                instances: gpus,
                peak_flops: 1e11,
                availability: 1.0,
                driver_version: 500,
            });
        }
        Host {
            id: HostId(1),
            resources,
            os_tag: "linux".into(),
            cpu_vendor_tag: "v".into(),
            cpu_model_tag: "m".into(),
            ram_bytes: 1 << 34,
            free_disk_bytes: 1 << 40,
            efficiency: 1.0,
            reliability: ReliabilityProfile::Honest,
            keyword_yes: Default::default(),
            keyword_no: Default::default(),
            sticky_files: Default::default(),
        }
    }

    fn prefs(cpus: f64) -> ComputingPrefs {
        ComputingPrefs {
            n_usable_cpus: cpus,
            max_ram_fraction: 1.0,
            throttle_duty_cycle: 1.0,
            buffer_lo_seconds: 3600.0,
            buffer_hi_seconds: 7200.0,
        }
    }

    fn state_with(host_cpus: f64, projects: &[(u32, f64)]) -> ClientState {
        let shares: Vec<(ProjectId, f64)> =
            projects.iter().map(|&(p, s)| (ProjectId(p), s)).collect();
        ClientState::new(HostId(1), prefs(host_cpus), &shares)
    }

    fn queue_job(
        st: &mut ClientState,
        id: u64,
        project: u32,
        cpu: f64,
        gpu: Option<f64>,
        remaining_s: f64,
        deadline_s: f64,
    ) {
        let mut usage = BTreeMap::new();
        if cpu > 0.0 {
            usage.insert(ResourceKind::Cpu, cpu);
        }
        if let Some(g) = gpu {
            usage.insert(ResourceKind::Gpu("nv".into()), g);
        }
        let seq = st.next_arrival_seq();
        st.jobs.push(super::super::ClientJob {
            instance: InstanceId(id),
            job: JobId(id),
            project: ProjectId(project),
            app_version: AppVersionId(1),
            usage,
            est_wss_bytes: 0,
            disk_bound_bytes: 0,
            static_total_raw: remaining_s,
            fraction_done: 0.0,
            accurate_fraction: false,
            elapsed_raw: 0.0,
            deadline: SimTime::from_secs_f64(deadline_s),
            received: SimTime::ZERO,
            arrival_seq: seq,
            state: RunState::Unstarted,
            never_checkpointed: true,
            slice_started: SimTime::ZERO,
            last_checkpoint: None,
            preempt_pending: false,
        });
    }

    #[test]
    fn edf_rescues_tight_deadline_job() {
        // One CPU. A week-long job arrives first; a one-hour job with a
        // 90-minute deadline arrives second. FIFO order starves the short
        // job; deadline scheduling runs it first.
        let mut st = state_with(1.0, &[(1, 1.0)]);
        queue_job(&mut st, 1, 1, 1.0, None, 7.0 * 86_400.0, 30.0 * 86_400.0);
        queue_job(&mut st, 2, 1, 1.0, None, 3600.0, 5400.0);
        let h = host(1, 0);
        let with_edf = schedule(&st, &h, SimTime::ZERO, true);
        assert_eq!(with_edf.run, vec![InstanceId(2)]);
        let without = schedule(&st, &h, SimTime::ZERO, false);
        assert_eq!(without.run, vec![InstanceId(1)]);
    }

    #[test]
    fn gpu_jobs_sort_before_cpu_jobs() {
        let mut st = state_with(1.0, &[(1, 1.0)]);
        queue_job(&mut st, 1, 1, 1.0, None, 1000.0, 1e9);
        queue_job(&mut st, 2, 1, 0.1, Some(1.0), 1000.0, 1e9);
        let h = host(1, 1);
        let plan = schedule(&st, &h, SimTime::ZERO, true);
        // GPU job first; the CPU job still fits (0.1 + 1.0 <= 2).
        assert_eq!(plan.run, vec![InstanceId(2), InstanceId(1)]);
    }

    #[test]
    fn running_unchckpointed_job_keeps_device_over_higher_balance() {
        let mut st = state_with(1.0, &[(1, 1.0), (2, 1.0)]);
        queue_job(&mut st, 1, 1, 1.0, None, 5000.0, 1e9);
        queue_job(&mut st, 2, 2, 1.0, None, 5000.0, 1e9);
        st.jobs[0].state = RunState::Running;
        st.jobs[0].slice_started = SimTime::ZERO;
        st.alloc.get_mut(&ProjectId(2)).unwrap().balance = 1000.0;
        let h = host(1, 0);
        let now = SimTime::from_secs_f64(100.0);
        let plan = schedule(&st, &h, now, true);
        assert_eq!(plan.run, vec![InstanceId(1)]);
        assert!(plan.preempt_now.is_empty());
        assert!(plan.preempt_at_checkpoint.is_empty());
    }

    #[test]
    fn exhausted_timeslice_yields_to_higher_balance() {
        let mut st = state_with(1.0, &[(1, 1.0), (2, 1.0)]);
        queue_job(&mut st, 1, 1, 1.0, None, 50_000.0, 1e9);
        queue_job(&mut st, 2, 2, 1.0, None, 50_000.0, 1e9);
        let now = SimTime::from_secs_f64(4000.0);
        st.jobs[0].state = RunState::Running;
        st.jobs[0].slice_started = SimTime::ZERO; // slice exhausted
        st.jobs[0].never_checkpointed = false;
        st.jobs[0].last_checkpoint = Some(SimTime::from_secs_f64(3900.0)); // recent
        st.alloc.get_mut(&ProjectId(2)).unwrap().balance = 1000.0;
        let h = host(1, 0);
        let plan = schedule(&st, &h, now, true);
        assert_eq!(plan.run, vec![InstanceId(2)]);
        // Checkpointed 100 s ago: safe to suspend immediately.
        assert_eq!(plan.preempt_now, vec![InstanceId(1)]);
        assert!(plan.preempt_at_checkpoint.is_empty());
    }

    #[test]
    fn stale_checkpoint_defers_preemption_to_next_checkpoint() {
        let mut st = state_with(1.0, &[(1, 1.0), (2, 1.0)]);
        queue_job(&mut st, 1, 1, 1.0, None, 50_000.0, 1e9);
        queue_job(&mut st, 2, 2, 1.0, None, 50_000.0, 1e9);
        let now = SimTime::from_secs_f64(4000.0);
        st.jobs[0].state = RunState::Running;
        st.jobs[0].slice_started = SimTime::ZERO;
        st.jobs[0].never_checkpointed = false;
        st.jobs[0].last_checkpoint = Some(SimTime::from_secs_f64(3000.0)); // 1000 s ago
        st.alloc.get_mut(&ProjectId(2)).unwrap().balance = 1000.0;
        let h = host(1, 0);
        let plan = schedule(&st, &h, now, true);
        assert_eq!(plan.preempt_at_checkpoint, vec![InstanceId(1)]);
        assert!(plan.preempt_now.is_empty());

        // The eviction lands when the checkpoint does.
        apply_schedule(&mut st, &plan, now);
        assert!(st.jobs[0].preempt_pending);
        assert_eq!(st.jobs[0].state, RunState::Running);
        let later = SimTime::from_secs_f64(4600.0);
        assert!(on_checkpoint(&mut st, InstanceId(1), later));
        assert_eq!(st.jobs[0].state, RunState::Preempted);
    }

    #[test]
    fn wider_cpu_jobs_selected_first() {
        let mut st = state_with(2.0, &[(1, 1.0)]);
        queue_job(&mut st, 1, 1, 1.0, None, 1000.0, 1e9);
        queue_job(&mut st, 2, 1, 2.0, None, 1000.0, 1e9);
        let h = host(2, 0);
        let plan = schedule(&st, &h, SimTime::ZERO, true);
        assert_eq!(plan.run, vec![InstanceId(2)]);
    }

    #[test]
    fn apply_marks_started_jobs_running() {
        let mut st = state_with(1.0, &[(1, 1.0)]);
        queue_job(&mut st, 1, 1, 1.0, None, 1000.0, 1e9);
        let h = host(1, 0);
        let now = SimTime::from_secs_f64(5.0);
        let plan = schedule(&st, &h, now, true);
        assert_eq!(plan.start, vec![InstanceId(1)]);
        apply_schedule(&mut st, &plan, now);
        assert_eq!(st.jobs[0].state, RunState::Running);
        assert_eq!(st.jobs[0].slice_started, now);
    }

    proptest! {
        /// The selected set is always maximal: every candidate left out
        /// would break feasibility if added.
        #[test]
        fn selection_is_maximal(
            spec in prop::collection::vec(
                (prop::sample::select(vec![0.5f64, 1.0, 2.0]),
                 prop::bool::ANY,
                 0u64..=4_000_000_000,
                 1u32..=3),
                1..=20,
            ),
            cpus in 1u32..=4,
            gpus in 0u32..=2,
        ) {
            let mut st = state_with(cpus as f64, &[(1, 1.0), (2, 1.0), (3, 1.0)]);
            st.prefs.max_ram_fraction = 0.5;
            for (i, &(cpu, wants_gpu, wss, proj)) in spec.iter().enumerate() {
                let gpu = if wants_gpu { Some(1.0) } else { None };
                queue_job(&mut st, i as u64, proj, cpu, gpu, 1000.0, 1e9);
                st.jobs.last_mut().unwrap().est_wss_bytes = wss;
            }
            let h = host(cpus, gpus);
            let plan = schedule(&st, &h, SimTime::ZERO, true);
            let chosen: Vec<&super::super::ClientJob> = st
                .jobs
                .iter()
                .filter(|j| plan.run.contains(&j.instance))
                .collect();
            prop_assert!(feasible(&chosen, &h, &st.prefs));
            for j in &st.jobs {
                if !plan.run.contains(&j.instance) {
                    let mut trial = chosen.clone();
                    trial.push(j);
                    prop_assert!(
                        !feasible(&trial, &h, &st.prefs),
                        "unselected job {:?} could have been added",
                        j.instance
                    );
                }
            }
        }
    }
}
