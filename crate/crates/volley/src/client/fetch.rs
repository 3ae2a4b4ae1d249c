//! Work-fetch and report policy: when to ask a project for more jobs, how
//! much to ask for, when finished results must be sent back, and the
//! exponential backoff applied to projects that return nothing.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::domain::{AppVersion, Host, ProjectId, ResourceKind, SimTime};

use super::{estimate_remaining_scaled, wrr::WrrOutcome, ClientState};

pub const BACKOFF_BASE_SECS: f64 = 60.0;
pub const BACKOFF_CAP_SECS: f64 = 86_400.0;

/// Fraction of the delay bound held back as reporting margin: a finished
/// result must be reported no later than this far before its deadline.
pub const REPORT_MARGIN_FRAC: f64 = 0.1;

/// Pending-report count that forces an immediate RPC regardless of margins.
pub const REPORT_BATCH: usize = 8;

/// What one project offers, as the client sees it: apps with their keywords
/// and the versions that might run here.
#[derive(Debug, Clone)]
pub struct CatalogApp {
    pub keywords: BTreeSet<String>,
    pub versions: Vec<AppVersion>,
}

#[derive(Debug, Clone)]
pub struct CatalogProject {
    pub id: ProjectId,
    pub apps: Vec<CatalogApp>,
}

/// Demand for one resource in a work request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResourceRequest {
    /// Unfilled buffer, in scaled seconds.
    pub req_runtime_seconds: f64,
    /// Instance slots idle right now.
    pub req_idle: u32,
    /// Scaled seconds of work already queued for this resource, so the
    /// server can honor the delay bound.
    pub queue_dur_seconds: f64,
}

/// A work request to one project, covering every resource it can supply.
#[derive(Debug, Clone)]
pub struct WorkRequest {
    pub project: ProjectId,
    pub resources: BTreeMap<ResourceKind, ResourceRequest>,
}

/// Whether an app is open to this host: no keyword the host refuses.
fn app_allowed(app: &CatalogApp, host: &Host) -> bool {
    app.keywords.is_disjoint(&host.keyword_no)
}

/// Whether `project` can supply work for `kind` on this host.
fn offers(project: &CatalogProject, host: &Host, kind: &ResourceKind) -> bool {
    project.apps.iter().any(|app| {
        app_allowed(app, host)
            && app
                .versions
                .iter()
                .any(|v| v.resource_usage.contains_key(kind) && v.is_compatible(host))
    })
}

fn backed_off(state: &ClientState, project: ProjectId, now: SimTime) -> bool {
    state
        .backoff
        .get(&project)
        .is_some_and(|b| b.next_allowed > now)
}

/// Projects in descending balance order (ties by id), the order in which
/// they get first refusal on a starved resource.
fn projects_by_priority(state: &ClientState) -> Vec<ProjectId> {
    let mut ids: Vec<ProjectId> = state.alloc.keys().copied().collect();
    ids.sort_by(|a, b| {
        state
            .balance(*b)
            .total_cmp(&state.balance(*a))
            .then(a.cmp(b))
    });
    ids
}

fn resource_request(
    state: &ClientState,
    wrr: &WrrOutcome,
    kind: &ResourceKind,
) -> ResourceRequest {
    let queue_dur: f64 = state
        .jobs
        .iter()
        .filter(|j| j.usage.contains_key(kind))
        .map(|j| {
            estimate_remaining_scaled(j, state.availability, state.prefs.throttle_duty_cycle)
        })
        .sum();
    ResourceRequest {
        req_runtime_seconds: wrr.shortfall_ms.get(kind).copied().unwrap_or(0) as f64 / 1000.0,
        req_idle: wrr.idle_now.get(kind).copied().unwrap_or(0),
        queue_dur_seconds: queue_dur,
    }
}

fn build_request(
    state: &ClientState,
    host: &Host,
    project: &CatalogProject,
    wrr: &WrrOutcome,
) -> WorkRequest {
    let mut resources = BTreeMap::new();
    for r in &host.resources {
        if offers(project, host, &r.kind) {
            resources.insert(r.kind.clone(), resource_request(state, wrr, &r.kind));
        }
    }
    WorkRequest {
        project: project.id,
        resources,
    }
}

/// Decide whether to fetch work, from whom, and how much.
///
/// Fetch triggers when any instance slot's projected busy time falls below
/// the low-water buffer. The request goes to the highest-balance project
/// that is not backed off and can actually supply a starved resource; it
/// asks for every resource that project offers here.
pub fn work_fetch(
    state: &ClientState,
    host: &Host,
    catalog: &[CatalogProject],
    now: SimTime,
) -> Option<WorkRequest> {
    let wrr = state.wrr(host, now);
    let b_lo_ms = SimTime::from_secs_f64(state.prefs.buffer_lo_seconds).as_millis();
    let starved: Vec<ResourceKind> = wrr
        .busy_ms
        .iter()
        .filter(|(_, slots)| slots.iter().any(|&b| b < b_lo_ms))
        .map(|(kind, _)| kind.clone())
        .collect();
    if starved.is_empty() {
        return None;
    }
    for pid in projects_by_priority(state) {
        if backed_off(state, pid, now) {
            continue;
        }
        let Some(project) = catalog.iter().find(|c| c.id == pid) else {
            continue;
        };
        if starved.iter().any(|kind| offers(project, host, kind)) {
            return Some(build_request(state, host, project, &wrr));
        }
    }
    None
}

/// Work request to piggyback on an RPC already going to `project` (for
/// reporting, say): only resources for which this project is currently the
/// top-priority eligible supplier, and only when there is demand.
pub fn piggyback_request(
    state: &ClientState,
    host: &Host,
    catalog: &[CatalogProject],
    project: ProjectId,
    now: SimTime,
) -> Option<WorkRequest> {
    let target = catalog.iter().find(|c| c.id == project)?;
    if backed_off(state, project, now) {
        return None;
    }
    let wrr = state.wrr(host, now);
    let priority = projects_by_priority(state);
    let mut resources = BTreeMap::new();
    for r in &host.resources {
        let top = priority.iter().copied().find(|&pid| {
            !backed_off(state, pid, now)
                && catalog
                    .iter()
                    .find(|c| c.id == pid)
                    .is_some_and(|c| offers(c, host, &r.kind))
        });
        if top != Some(project) || !offers(target, host, &r.kind) {
            continue;
        }
        let req = resource_request(state, &wrr, &r.kind);
        if req.req_runtime_seconds > 0.0 || req.req_idle > 0 {
            resources.insert(r.kind.clone(), req);
        }
    }
    if resources.is_empty() {
        None
    } else {
        Some(WorkRequest {
            project,
            resources,
        })
    }
}

/// Projects that must be contacted right now to deliver finished results:
/// any report inside its deadline margin forces its project; a backlog of
/// `REPORT_BATCH` or more forces every project holding reports.
pub fn report_now(state: &ClientState, now: SimTime) -> BTreeSet<ProjectId> {
    let mut forced: BTreeSet<ProjectId> = state
        .pending_reports
        .iter()
        .filter(|r| now >= r.report_by)
        .map(|r| r.project)
        .collect();
    if state.pending_reports.len() >= REPORT_BATCH {
        forced.extend(state.pending_reports.iter().map(|r| r.project));
    }
    forced
}

/// Earliest time any pending report becomes forced, for scheduling a wakeup.
pub fn next_report_deadline(state: &ClientState) -> Option<SimTime> {
    state.pending_reports.iter().map(|r| r.report_by).min()
}

/// Fold an RPC outcome into the project's backoff state. An RPC that asked
/// for work and got none is a failure: the wait doubles from a minute up to
/// a day, jittered 20% either way. Getting work clears the backoff.
/// Returns the delay applied, if any.
pub fn on_rpc_result<R: Rng + ?Sized>(
    state: &mut ClientState,
    project: ProjectId,
    got_work: bool,
    now: SimTime,
    rng: &mut R,
) -> Option<f64> {
    let b = state.backoff.entry(project).or_default();
    if got_work {
        b.consecutive_failures = 0;
        b.next_allowed = now;
        None
    } else {
        b.consecutive_failures += 1;
        let exp = (b.consecutive_failures - 1).min(63);
        let raw = (BACKOFF_BASE_SECS * (2.0_f64).powi(exp as i32)).min(BACKOFF_CAP_SECS);
        let delay = raw * rng.random_range(0.8..1.2);
        b.next_allowed = now.after_secs_f64(delay);
        Some(delay)
    }
}
