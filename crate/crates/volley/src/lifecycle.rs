//! Server-side job state machine: instance creation, deadline timeouts,
//! quorum-driven validation, terminal outcomes and purge eligibility.
//! All instance creation funnels through [`transition`] so the rules stay
//! in one place.

use thiserror::Error;

use crate::domain::{
    AppVersionId, HostId, InstanceId, JobId, JobSpec, SimTime,
};
use crate::validation::{check_quorum, equivalent, Comparator, Digest};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstanceState {
    Unsent,
    InProgress,
    SuccessReported,
    ErrorReported,
    TimedOut,
    Cancelled,
}

impl InstanceState {
    /// Resolved means the server will take no further action for it.
    pub fn is_resolved(self) -> bool {
        !matches!(self, InstanceState::Unsent | InstanceState::InProgress)
    }
}

/// One replica of a job.
#[derive(Debug, Clone)]
pub struct JobInstance {
    pub id: InstanceId,
    pub job: JobId,
    pub state: InstanceState,
    pub host: Option<HostId>,
    pub app_version: Option<AppVersionId>,
    pub dispatched_at: Option<SimTime>,
    /// dispatched_at + delay_bound, fixed at dispatch.
    pub deadline: Option<SimTime>,
    /// Raw compute seconds the host reported.
    pub reported_runtime: f64,
    pub digest: Option<Digest>,
    /// Set when compared against the canonical result.
    pub validated: Option<bool>,
    // Replacement already spawned for this instance's failure/timeout.
    replaced: bool,
}

impl JobInstance {
    fn new(id: InstanceId, job: JobId) -> Self {
        JobInstance {
            id,
            job,
            state: InstanceState::Unsent,
            host: None,
            app_version: None,
            dispatched_at: None,
            deadline: None,
            reported_runtime: 0.0,
            digest: None,
            validated: None,
            replaced: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailReason {
    TooManyErrors,
    /// Success limit hit without a majority.
    Nondeterministic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobState {
    Active,
    Success { canonical: InstanceId },
    Failed { reason: FailReason },
}

/// Allocator for globally unique instance ids.
#[derive(Debug, Default, Clone)]
pub struct InstanceIds {
    next: u64,
}

impl InstanceIds {
    pub fn next(&mut self) -> InstanceId {
        let id = InstanceId(self.next);
        self.next += 1;
        id
    }
}

/// A job and all its instances.
#[derive(Debug, Clone)]
pub struct Job {
    pub id: JobId,
    pub spec: JobSpec,
    pub created_at: SimTime,
    pub state: JobState,
    pub instances: Vec<JobInstance>,
    /// Effective quorum. Starts at spec.min_quorum; drops to 1 when
    /// adaptive replication decides not to replicate.
    pub min_quorum: u32,
    /// Homogeneous-redundancy class fixed by the first dispatch; 0 unset.
    pub hr_class_lock: u64,
    /// App version fixed by the first dispatch when homogeneous app
    /// version is enforced.
    pub app_version_lock: Option<AppVersionId>,
    pub needs_transition: bool,
    pub terminal_at: Option<SimTime>,
    /// Credit granted at assimilation, for reporting.
    pub granted: Option<f64>,
}

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("init_ninstances {init} < min_quorum {quorum}")]
    InitBelowQuorum { init: u32, quorum: u32 },
    #[error("min_quorum must be at least 1")]
    ZeroQuorum,
    #[error("est_flop_count must be positive")]
    NonPositiveEst,
    #[error("max_flop_count {max} below est_flop_count {est}")]
    MaxBelowEst { max: f64, est: f64 },
    #[error("delay_bound_seconds must be positive")]
    NonPositiveDelayBound,
}

/// Build an active job with init_ninstances unsent instances.
pub fn create_job(
    id: JobId,
    spec: JobSpec,
    now: SimTime,
    ids: &mut InstanceIds,
) -> Result<Job, SpecError> {
    if spec.min_quorum == 0 {
        return Err(SpecError::ZeroQuorum);
    }
    if spec.init_ninstances < spec.min_quorum {
        return Err(SpecError::InitBelowQuorum {
            init: spec.init_ninstances,
            quorum: spec.min_quorum,
        });
    }
    if !(spec.est_flop_count > 0.0) {
        return Err(SpecError::NonPositiveEst);
    }
    if spec.max_flop_count < spec.est_flop_count {
        return Err(SpecError::MaxBelowEst {
            max: spec.max_flop_count,
            est: spec.est_flop_count,
        });
    }
    if !(spec.delay_bound_seconds > 0.0) {
        return Err(SpecError::NonPositiveDelayBound);
    }
    let mut job = Job {
        id,
        min_quorum: spec.min_quorum,
        spec,
        created_at: now,
        state: JobState::Active,
        instances: Vec::new(),
        hr_class_lock: 0,
        app_version_lock: None,
        needs_transition: false,
        terminal_at: None,
        granted: None,
    };
    for _ in 0..job.spec.init_ninstances {
        job.instances.push(JobInstance::new(ids.next(), id));
    }
    Ok(job)
}

impl Job {
    pub fn is_terminal(&self) -> bool {
        !matches!(self.state, JobState::Active)
    }

    pub fn canonical(&self) -> Option<InstanceId> {
        match self.state {
            JobState::Success { canonical } => Some(canonical),
            _ => None,
        }
    }

    pub fn instance(&self, id: InstanceId) -> Option<&JobInstance> {
        self.instances.iter().find(|i| i.id == id)
    }

    pub fn instance_mut(&mut self, id: InstanceId) -> Option<&mut JobInstance> {
        self.instances.iter_mut().find(|i| i.id == id)
    }

    pub fn count_state(&self, state: InstanceState) -> usize {
        self.instances.iter().filter(|i| i.state == state).count()
    }

    pub fn live_count(&self) -> usize {
        self.instances.iter().filter(|i| !i.state.is_resolved()).count()
    }

    /// True when the first dispatch has not happened yet.
    pub fn undispatched(&self) -> bool {
        self.instances
            .iter()
            .all(|i| i.state == InstanceState::Unsent)
    }

    /// Record the first-dispatch locks. Locks never change once set.
    pub fn set_locks(&mut self, hr_class: u64, version: Option<AppVersionId>) {
        if hr_class != 0 {
            debug_assert!(self.hr_class_lock == 0 || self.hr_class_lock == hr_class);
            self.hr_class_lock = hr_class;
        }
        if let Some(v) = version {
            debug_assert!(self.app_version_lock.is_none() || self.app_version_lock == Some(v));
            self.app_version_lock = Some(v);
        }
    }
}

/// Mark an unsent instance dispatched; returns its deadline.
pub fn mark_dispatched(
    job: &mut Job,
    instance: InstanceId,
    host: HostId,
    version: AppVersionId,
    now: SimTime,
) -> SimTime {
    let delay_bound = job.spec.delay_bound_seconds;
    let inst = job.instance_mut(instance).expect("instance belongs to job");
    debug_assert_eq!(inst.state, InstanceState::Unsent);
    let deadline = now.after_secs_f64(delay_bound);
    inst.state = InstanceState::InProgress;
    inst.host = Some(host);
    inst.app_version = Some(version);
    inst.dispatched_at = Some(now);
    inst.deadline = Some(deadline);
    deadline
}

/// Shrink a job that adaptive replication decided not to replicate:
/// quorum 1, one instance. Every unsent instance except `keep` is
/// cancelled. Only legal before any instance was dispatched.
pub fn shrink_to_single(job: &mut Job, keep: InstanceId) -> Vec<InstanceId> {
    debug_assert!(job.undispatched());
    job.min_quorum = 1;
    let mut cancelled = Vec::new();
    for inst in &mut job.instances {
        if inst.id != keep && inst.state == InstanceState::Unsent {
            inst.state = InstanceState::Cancelled;
            cancelled.push(inst.id);
        }
    }
    cancelled
}

/// Deadline event. Marks the instance timed out and queues a transition;
/// replacement creation happens there. Idempotent for resolved instances
/// and harmless on terminal jobs (the instance still resolves, nothing is
/// created).
pub fn on_deadline(job: &mut Job, instance: InstanceId, now: SimTime) -> bool {
    let inst = match job.instance_mut(instance) {
        Some(i) => i,
        None => return false,
    };
    if inst.state != InstanceState::InProgress {
        return false;
    }
    debug_assert!(inst.deadline.map_or(true, |d| now >= d));
    inst.state = InstanceState::TimedOut;
    job.needs_transition = true;
    true
}

/// What a host reported for an instance.
#[derive(Debug, Clone)]
pub enum ReportOutcome {
    Success { digest: Digest, runtime: f64 },
    Error,
}

/// Apply a host report. Late reports for timed-out instances are accepted
/// (their result can still validate); duplicates and reports for cancelled
/// instances are ignored. Returns whether the report was applied.
pub fn on_report(job: &mut Job, instance: InstanceId, outcome: ReportOutcome) -> bool {
    let inst = match job.instance_mut(instance) {
        Some(i) => i,
        None => return false,
    };
    match inst.state {
        InstanceState::InProgress | InstanceState::TimedOut => {}
        _ => return false,
    }
    match outcome {
        ReportOutcome::Success { digest, runtime } => {
            inst.state = InstanceState::SuccessReported;
            inst.digest = Some(digest);
            inst.reported_runtime = runtime;
        }
        ReportOutcome::Error => {
            inst.state = InstanceState::ErrorReported;
        }
    }
    job.needs_transition = true;
    true
}

/// What one transition pass did, for stats, credit and the trace.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct TransitionEffects {
    /// A quorum check ran this pass.
    pub quorum_checked: bool,
    /// Canonical instance chosen this pass.
    pub canonical_found: Option<InstanceId>,
    /// Instances compared against the canonical result this pass.
    pub newly_validated: Vec<(InstanceId, bool)>,
    pub created: Vec<InstanceId>,
    pub cancelled: Vec<InstanceId>,
    /// Set when the job reached a terminal state this pass.
    pub newly_terminal: Option<JobState>,
}

fn cancel_unsent(job: &mut Job, fx: &mut TransitionEffects) {
    for inst in &mut job.instances {
        if inst.state == InstanceState::Unsent {
            inst.state = InstanceState::Cancelled;
            fx.cancelled.push(inst.id);
        }
    }
}

/// The transitioner pass for one job. Validates successes, applies the
/// instance limits, creates replacements. Idempotent: a second call with
/// no intervening event reports nothing new.
pub fn transition(
    job: &mut Job,
    comparator: Comparator,
    now: SimTime,
    timeout_counts_as_error: bool,
    ids: &mut InstanceIds,
) -> TransitionEffects {
    let mut fx = TransitionEffects::default();
    if !job.needs_transition {
        return fx;
    }
    job.needs_transition = false;

    // With a canonical result every unvalidated success is compared to it,
    // whether the report was on time or late. No instances are created.
    if let Some(canonical) = job.canonical() {
        let canon_digest = job
            .instance(canonical)
            .and_then(|i| i.digest.clone())
            .expect("canonical instance has a digest");
        for inst in &mut job.instances {
            if inst.state == InstanceState::SuccessReported && inst.validated.is_none() {
                let valid = inst
                    .digest
                    .as_ref()
                    .is_some_and(|d| equivalent(d, &canon_digest, comparator));
                inst.validated = Some(valid);
                fx.newly_validated.push((inst.id, valid));
            }
        }
        return fx;
    }
    if job.is_terminal() {
        return fx;
    }

    // Quorum check over every reported success.
    let successes: Vec<(InstanceId, &Digest)> = job
        .instances
        .iter()
        .filter(|i| i.state == InstanceState::SuccessReported)
        .map(|i| (i.id, i.digest.as_ref().expect("success has digest")))
        .collect();
    let n_success = successes.len();
    if n_success >= job.min_quorum as usize {
        fx.quorum_checked = true;
        let decision = check_quorum(&successes, comparator, job.min_quorum);
        if let Some(canonical) = decision.canonical {
            for id in &decision.valid {
                job.instance_mut(*id).unwrap().validated = Some(true);
                fx.newly_validated.push((*id, true));
            }
            for id in &decision.invalid {
                job.instance_mut(*id).unwrap().validated = Some(false);
                fx.newly_validated.push((*id, false));
            }
            job.state = JobState::Success { canonical };
            job.terminal_at = Some(now);
            fx.canonical_found = Some(canonical);
            fx.newly_terminal = Some(job.state);
            cancel_unsent(job, &mut fx);
            return fx;
        }
    }

    // Limits. Successes beyond the cap with no majority means the job
    // never converges; errors beyond the cap means it keeps crashing.
    if n_success > job.spec.max_success_instances as usize {
        job.state = JobState::Failed { reason: FailReason::Nondeterministic };
        job.terminal_at = Some(now);
        fx.newly_terminal = Some(job.state);
        cancel_unsent(job, &mut fx);
        return fx;
    }
    let mut n_error = job.count_state(InstanceState::ErrorReported);
    if timeout_counts_as_error {
        n_error += job.count_state(InstanceState::TimedOut);
    }
    if n_error > job.spec.max_error_instances as usize {
        job.state = JobState::Failed { reason: FailReason::TooManyErrors };
        job.terminal_at = Some(now);
        fx.newly_terminal = Some(job.state);
        cancel_unsent(job, &mut fx);
        return fx;
    }

    // One replacement per newly failed or timed-out instance.
    let mut replacements = 0;
    for inst in &mut job.instances {
        let failed = matches!(
            inst.state,
            InstanceState::ErrorReported | InstanceState::TimedOut
        );
        if failed && !inst.replaced {
            inst.replaced = true;
            replacements += 1;
        }
    }
    // A quorum check that found no majority needs one more result, but
    // only if nothing is already on the way.
    if fx.quorum_checked && job.live_count() + replacements == 0 {
        replacements += 1;
    }
    for _ in 0..replacements {
        let inst = JobInstance::new(ids.next(), job.id);
        fx.created.push(inst.id);
        job.instances.push(inst);
    }
    fx
}

/// A job can be purged once terminal, fully resolved, and past the grace
/// period that lets stragglers report.
pub fn purge_eligible(job: &Job, grace_seconds: f64, now: SimTime) -> bool {
    if !job.is_terminal() {
        return false;
    }
    if job.instances.iter().any(|i| !i.state.is_resolved()) {
        return false;
    }
    match job.terminal_at {
        Some(t) => now >= t.after_secs_f64(grace_seconds),
        None => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{AppId, ProjectId};

    fn spec(min_quorum: u32, init: u32) -> JobSpec {
        JobSpec {
            app: AppId(1),
            submitter: ProjectId(1),
            est_flop_count: 1e12,
            max_flop_count: 1e13,
            est_wss_bytes: 1 << 20,
            disk_bound_bytes: 1 << 20,
            delay_bound_seconds: 1000.0,
            min_quorum,
            init_ninstances: init,
            max_error_instances: 3,
            max_success_instances: 6,
            keywords: vec![],
            input_files: vec![],
            size_class: 1,
        }
    }

    fn job(min_quorum: u32, init: u32, ids: &mut InstanceIds) -> Job {
        create_job(JobId(1), spec(min_quorum, init), SimTime::ZERO, ids).unwrap()
    }

    fn dispatch_next(job: &mut Job, ids_seen: &mut Vec<InstanceId>, now: SimTime) -> InstanceId {
        let id = job
            .instances
            .iter()
            .find(|i| i.state == InstanceState::Unsent)
            .expect("an unsent instance exists")
            .id;
        mark_dispatched(job, id, HostId(9), AppVersionId(1), now);
        ids_seen.push(id);
        id
    }

    fn digest(v: f64) -> Digest {
        Digest(vec![v])
    }

    const CMP: Comparator = Comparator::Bitwise;

    #[test]
    fn create_makes_init_unsent_instances() {
        let mut ids = InstanceIds::default();
        let j = job(2, 2, &mut ids);
        assert_eq!(j.count_state(InstanceState::Unsent), 2);
        let j3 = job(2, 3, &mut ids);
        assert_eq!(j3.count_state(InstanceState::Unsent), 3);
        assert_eq!(j3.state, JobState::Active);
    }

    #[test]
    fn create_rejects_init_below_quorum() {
        let mut ids = InstanceIds::default();
        let err = create_job(JobId(1), spec(2, 1), SimTime::ZERO, &mut ids).unwrap_err();
        assert_eq!(err, SpecError::InitBelowQuorum { init: 1, quorum: 2 });
    }

    #[test]
    fn timeout_creates_replacement_via_transition() {
        let mut ids = InstanceIds::default();
        let mut j = job(2, 2, &mut ids);
        let mut seen = vec![];
        let a = dispatch_next(&mut j, &mut seen, SimTime::ZERO);
        dispatch_next(&mut j, &mut seen, SimTime::ZERO);
        let t = SimTime::from_secs_f64(1000.0);
        assert!(on_deadline(&mut j, a, t));
        let fx = transition(&mut j, CMP, t, false, &mut ids);
        assert_eq!(fx.created.len(), 1);
        assert_eq!(j.instances.len(), 3);
        assert_eq!(j.count_state(InstanceState::TimedOut), 1);
        // Replaying the deadline changes nothing.
        assert!(!on_deadline(&mut j, a, t));
        let fx2 = transition(&mut j, CMP, t, false, &mut ids);
        assert_eq!(fx2, TransitionEffects::default());
    }

    #[test]
    fn late_success_after_timeout_still_validates() {
        let mut ids = InstanceIds::default();
        let mut j = job(2, 2, &mut ids);
        let mut seen = vec![];
        let a = dispatch_next(&mut j, &mut seen, SimTime::ZERO);
        let b = dispatch_next(&mut j, &mut seen, SimTime::ZERO);
        let t = SimTime::from_secs_f64(1000.0);
        on_deadline(&mut j, a, t);
        let fx = transition(&mut j, CMP, t, false, &mut ids);
        let c = fx.created[0];
        mark_dispatched(&mut j, c, HostId(2), AppVersionId(1), t);

        on_report(&mut j, b, ReportOutcome::Success { digest: digest(1.0), runtime: 50.0 });
        transition(&mut j, CMP, t, false, &mut ids);
        on_report(&mut j, c, ReportOutcome::Success { digest: digest(1.0), runtime: 60.0 });
        let fx = transition(&mut j, CMP, t, false, &mut ids);
        assert_eq!(fx.canonical_found, Some(b));
        assert_eq!(j.state, JobState::Success { canonical: b });

        // The timed-out instance reports late and validates against the
        // canonical digest without changing job state.
        assert!(on_report(&mut j, a, ReportOutcome::Success { digest: digest(1.0), runtime: 70.0 }));
        let fx = transition(&mut j, CMP, t, false, &mut ids);
        assert_eq!(fx.newly_validated, vec![(a, true)]);
        assert!(fx.created.is_empty());
        assert_eq!(j.state, JobState::Success { canonical: b });
    }

    #[test]
    fn deadline_after_terminal_creates_nothing() {
        let mut ids = InstanceIds::default();
        let mut j = job(2, 2, &mut ids);
        let mut seen = vec![];
        let a = dispatch_next(&mut j, &mut seen, SimTime::ZERO);
        let b = dispatch_next(&mut j, &mut seen, SimTime::ZERO);
        // Fail the job through repeated errors while b stays in flight.
        on_report(&mut j, a, ReportOutcome::Error);
        let mut fx = transition(&mut j, CMP, SimTime::ZERO, false, &mut ids);
        while fx.newly_terminal.is_none() {
            let next = fx.created[0];
            mark_dispatched(&mut j, next, HostId(9), AppVersionId(1), SimTime::ZERO);
            on_report(&mut j, next, ReportOutcome::Error);
            fx = transition(&mut j, CMP, SimTime::ZERO, false, &mut ids);
        }
        assert_eq!(j.state, JobState::Failed { reason: FailReason::TooManyErrors });
        let total = j.instances.len();
        // The straggler's deadline resolves it without creating anything.
        let t = SimTime::from_secs_f64(1000.0);
        assert!(on_deadline(&mut j, b, t));
        let fx = transition(&mut j, CMP, t, false, &mut ids);
        assert!(fx.created.is_empty());
        assert_eq!(j.instances.len(), total);
        assert_eq!(j.count_state(InstanceState::TimedOut), 1);
        assert!(purge_eligible(&j, 0.0, t));
    }

    #[test]
    fn first_success_below_quorum_waits() {
        let mut ids = InstanceIds::default();
        let mut j = job(2, 2, &mut ids);
        let mut seen = vec![];
        let a = dispatch_next(&mut j, &mut seen, SimTime::ZERO);
        on_report(&mut j, a, ReportOutcome::Success { digest: digest(1.0), runtime: 10.0 });
        let fx = transition(&mut j, CMP, SimTime::ZERO, false, &mut ids);
        assert!(!fx.quorum_checked);
        assert_eq!(j.state, JobState::Active);
    }

    #[test]
    fn equivalent_pair_reaches_canonical() {
        let mut ids = InstanceIds::default();
        let mut j = job(2, 2, &mut ids);
        let mut seen = vec![];
        let a = dispatch_next(&mut j, &mut seen, SimTime::ZERO);
        let b = dispatch_next(&mut j, &mut seen, SimTime::ZERO);
        on_report(&mut j, a, ReportOutcome::Success { digest: digest(1.0), runtime: 10.0 });
        transition(&mut j, CMP, SimTime::ZERO, false, &mut ids);
        on_report(&mut j, b, ReportOutcome::Success { digest: digest(1.0), runtime: 12.0 });
        let fx = transition(&mut j, CMP, SimTime::ZERO, false, &mut ids);
        assert_eq!(fx.canonical_found, Some(a));
        assert_eq!(fx.newly_validated, vec![(a, true), (b, true)]);
        assert!(purge_eligible(&j, 0.0, SimTime::ZERO));
    }

    #[test]
    fn inequivalent_pair_spawns_third() {
        let mut ids = InstanceIds::default();
        let mut j = job(2, 2, &mut ids);
        let mut seen = vec![];
        let a = dispatch_next(&mut j, &mut seen, SimTime::ZERO);
        let b = dispatch_next(&mut j, &mut seen, SimTime::ZERO);
        on_report(&mut j, a, ReportOutcome::Success { digest: digest(1.0), runtime: 10.0 });
        transition(&mut j, CMP, SimTime::ZERO, false, &mut ids);
        on_report(&mut j, b, ReportOutcome::Success { digest: digest(2.0), runtime: 12.0 });
        let fx = transition(&mut j, CMP, SimTime::ZERO, false, &mut ids);
        assert!(fx.quorum_checked);
        assert_eq!(fx.canonical_found, None);
        assert_eq!(fx.created.len(), 1);
        assert_eq!(j.state, JobState::Active);

        // The tie-breaker agreeing with one side settles the majority.
        let c = fx.created[0];
        mark_dispatched(&mut j, c, HostId(3), AppVersionId(1), SimTime::ZERO);
        on_report(&mut j, c, ReportOutcome::Success { digest: digest(1.0), runtime: 9.0 });
        let fx = transition(&mut j, CMP, SimTime::ZERO, false, &mut ids);
        assert_eq!(fx.canonical_found, Some(a));
        assert_eq!(fx.newly_validated, vec![(a, true), (c, true), (b, false)]);
    }

    #[test]
    fn success_limit_without_majority_fails() {
        let mut ids = InstanceIds::default();
        let mut j = job(2, 2, &mut ids);
        let mut seen = vec![];
        // Every instance returns a distinct digest; the job churns until
        // the success cap trips.
        let mut value = 0.0;
        loop {
            let unsent: Vec<InstanceId> = j
                .instances
                .iter()
                .filter(|i| i.state == InstanceState::Unsent)
                .map(|i| i.id)
                .collect();
            for id in unsent {
                mark_dispatched(&mut j, id, HostId(9), AppVersionId(1), SimTime::ZERO);
                seen.push(id);
                value += 1.0;
                on_report(
                    &mut j,
                    id,
                    ReportOutcome::Success { digest: digest(value), runtime: 1.0 },
                );
            }
            let fx = transition(&mut j, CMP, SimTime::ZERO, false, &mut ids);
            if let Some(state) = fx.newly_terminal {
                assert_eq!(state, JobState::Failed { reason: FailReason::Nondeterministic });
                break;
            }
            assert!(j.instances.len() < 32, "job failed to terminate");
        }
        assert_eq!(j.count_state(InstanceState::SuccessReported), 7);
    }

    #[test]
    fn error_limit_fails_job() {
        let mut ids = InstanceIds::default();
        let mut j = job(2, 2, &mut ids);
        let mut seen = vec![];
        let mut reported = 0;
        loop {
            let unsent: Vec<InstanceId> = j
                .instances
                .iter()
                .filter(|i| i.state == InstanceState::Unsent)
                .map(|i| i.id)
                .collect();
            let mut fx = TransitionEffects::default();
            for id in unsent {
                mark_dispatched(&mut j, id, HostId(9), AppVersionId(1), SimTime::ZERO);
                seen.push(id);
                on_report(&mut j, id, ReportOutcome::Error);
                reported += 1;
                fx = transition(&mut j, CMP, SimTime::ZERO, false, &mut ids);
                if fx.newly_terminal.is_some() {
                    break;
                }
            }
            if let Some(state) = fx.newly_terminal {
                assert_eq!(state, JobState::Failed { reason: FailReason::TooManyErrors });
                break;
            }
            assert!(reported < 32, "job failed to terminate");
        }
        // max_error_instances 3: the fourth error crosses the limit.
        assert_eq!(j.count_state(InstanceState::ErrorReported), 4);
    }

    #[test]
    fn timeouts_do_not_trip_error_limit_by_default() {
        let mut ids = InstanceIds::default();
        let mut j = job(2, 2, &mut ids);
        let mut seen = vec![];
        for round in 0..6 {
            let a = dispatch_next(&mut j, &mut seen, SimTime::ZERO);
            let t = SimTime::from_secs_f64(1000.0 * (round + 1) as f64);
            on_deadline(&mut j, a, t);
            transition(&mut j, CMP, t, false, &mut ids);
        }
        assert_eq!(j.state, JobState::Active);
        assert_eq!(j.count_state(InstanceState::TimedOut), 6);

        // With the flag flipped, timeouts fail the job like errors.
        let mut j2 = job(2, 2, &mut ids);
        let mut seen2 = vec![];
        loop {
            let a = dispatch_next(&mut j2, &mut seen2, SimTime::ZERO);
            on_deadline(&mut j2, a, SimTime::from_secs_f64(1000.0));
            let fx = transition(&mut j2, CMP, SimTime::from_secs_f64(1000.0), true, &mut ids);
            if fx.newly_terminal.is_some() {
                break;
            }
            assert!(j2.instances.len() < 16);
        }
        assert_eq!(j2.state, JobState::Failed { reason: FailReason::TooManyErrors });
    }

    #[test]
    fn success_after_canonical_validates_without_state_change() {
        let mut ids = InstanceIds::default();
        let mut j = job(2, 3, &mut ids);
        let mut seen = vec![];
        let a = dispatch_next(&mut j, &mut seen, SimTime::ZERO);
        let b = dispatch_next(&mut j, &mut seen, SimTime::ZERO);
        let c = dispatch_next(&mut j, &mut seen, SimTime::ZERO);
        on_report(&mut j, a, ReportOutcome::Success { digest: digest(1.0), runtime: 10.0 });
        on_report(&mut j, b, ReportOutcome::Success { digest: digest(1.0), runtime: 11.0 });
        let fx = transition(&mut j, CMP, SimTime::ZERO, false, &mut ids);
        assert_eq!(fx.canonical_found, Some(a));

        on_report(&mut j, c, ReportOutcome::Success { digest: digest(1.0), runtime: 12.0 });
        let fx = transition(&mut j, CMP, SimTime::ZERO, false, &mut ids);
        assert_eq!(fx.newly_validated, vec![(c, true)]);
        assert_eq!(j.state, JobState::Success { canonical: a });

        // Duplicate report is ignored.
        assert!(!on_report(&mut j, c, ReportOutcome::Error));
    }

    #[test]
    fn purge_respects_grace_and_stragglers() {
        let mut ids = InstanceIds::default();
        let mut j = job(2, 3, &mut ids);
        let mut seen = vec![];
        let a = dispatch_next(&mut j, &mut seen, SimTime::ZERO);
        let b = dispatch_next(&mut j, &mut seen, SimTime::ZERO);
        let c = dispatch_next(&mut j, &mut seen, SimTime::ZERO);
        on_report(&mut j, a, ReportOutcome::Success { digest: digest(1.0), runtime: 10.0 });
        assert!(!purge_eligible(&j, 3600.0, SimTime::from_secs_f64(5000.0)));
        on_report(&mut j, b, ReportOutcome::Success { digest: digest(1.0), runtime: 11.0 });
        transition(&mut j, CMP, SimTime::from_secs_f64(100.0), false, &mut ids);
        assert_eq!(j.canonical(), Some(a));

        // One instance still in flight blocks the purge.
        assert!(!purge_eligible(&j, 3600.0, SimTime::from_secs_f64(5000.0)));
        on_report(&mut j, c, ReportOutcome::Success { digest: digest(1.0), runtime: 12.0 });
        assert!(purge_eligible(&j, 3600.0, SimTime::from_secs_f64(5000.0)));
        assert!(!purge_eligible(&j, 3600.0, SimTime::from_secs_f64(3000.0)));
    }

    #[test]
    fn shrink_to_single_cancels_siblings() {
        let mut ids = InstanceIds::default();
        let mut j = job(2, 2, &mut ids);
        let keep = j.instances[0].id;
        let cancelled = shrink_to_single(&mut j, keep);
        assert_eq!(cancelled.len(), 1);
        assert_eq!(j.min_quorum, 1);
        // A single success now settles the job.
        mark_dispatched(&mut j, keep, HostId(5), AppVersionId(1), SimTime::ZERO);
        on_report(&mut j, keep, ReportOutcome::Success { digest: digest(4.0), runtime: 9.0 });
        let fx = transition(&mut j, CMP, SimTime::ZERO, false, &mut ids);
        assert_eq!(fx.canonical_found, Some(keep));
    }
}
