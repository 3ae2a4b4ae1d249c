//! The discrete-event loop. Builds a host fleet and a server from a
//! scenario, then runs clients against the server over simulated time:
//! RPCs, execution progress, churn, deadlines, validation, credit.
//!
//! Determinism: all randomness comes from ChaCha streams derived from the
//! scenario seed (stream 0 server, 1 fleet construction, 2 job streams,
//! 100+i for host i), and ties in the event queue pop in push order. Two
//! runs with the same config produce byte-identical traces.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::client::fetch::{
    next_report_deadline, on_rpc_result, piggyback_request, report_now, work_fetch, CatalogApp,
    CatalogProject,
};
use crate::client::schedule::{apply_schedule, on_checkpoint, schedule, CHECKPOINT_INTERVAL_SECS};
use crate::client::{ClientJob, ClientState, PendingReport, RunState};
use crate::domain::{
    AppId, AppVersion, AppVersionId, Compatibility, ComputingPrefs, Host, HostId, InstanceId,
    JobId, JobSpec, ProjectId, ResourceKind, SimTime,
};
use crate::lifecycle::{JobState, ReportOutcome};
use crate::server::{AppPolicy, InstanceReport, RpcRequest, ServerState};
use crate::sim::event::{Event, EventQueue};
use crate::sim::hostmodel::{build_hosts, honest_digest, ChurnModel, Outcome, OutcomeSampler};
use crate::sim::metrics::{Metrics, MetricsAcc};
use crate::sim::scenario::{ConfigError, JobStreamConfig, Scenario};
use crate::trace::{Trace, Value};
use crate::validation::{equivalent, Comparator};

/// Work-fetch RPCs a client may issue back to back in one pass. Each fetch
/// that lands work changes the picture, so the client re-evaluates; this
/// bounds the burst.
const MAX_FETCH_ROUNDS: usize = 4;

/// Run a scenario to completion and return the aggregate metrics.
///
/// The trace receives every event the run emits; pass [`Trace::null()`] to
/// skip that work. Fails only on an invalid scenario.
pub fn run(scenario: &Scenario, trace: &mut Trace) -> Result<Metrics, ConfigError> {
    scenario.validate()?;
    let mut engine = Engine::new(scenario, trace)?;
    engine.run_loop();
    let metrics = engine.finish();
    trace.finish();
    Ok(metrics)
}

/// Ground truth for one job, fixed at submission. The estimate the server
/// sees may be off by the configured factor; this is what execution costs.
#[derive(Debug, Clone, Copy)]
struct JobTruth {
    true_flop: f64,
    max_flop: f64,
}

/// Raw compute-seconds one host needs for an instance: the real total and
/// the runaway abort point.
#[derive(Debug, Clone, Copy)]
struct ExecTotals {
    true_raw: f64,
    abort_raw: f64,
}

impl ExecTotals {
    fn total(self) -> f64 {
        self.true_raw.min(self.abort_raw)
    }

    fn crashes(self) -> bool {
        self.abort_raw < self.true_raw
    }
}

/// One batch of jobs submitted together; turnaround is sampled when the
/// last member settles.
#[derive(Debug)]
struct BatchTrack {
    total: u32,
    done: u32,
    submitted: SimTime,
}

/// One project's job source.
#[derive(Debug)]
struct StreamState {
    project: ProjectId,
    app: AppId,
    cfg: JobStreamConfig,
    next_at: SimTime,
    /// Jobs left to submit; None means unbounded.
    remaining: Option<u64>,
}

impl StreamState {
    fn due(&self, now: SimTime) -> bool {
        self.remaining != Some(0) && self.next_at <= now
    }
}

/// A simulated volunteer: client state plus everything the engine needs to
/// execute its tasks (ground-truth speeds, its RNG, completion generations).
struct SimClient {
    state: ClientState,
    host: Host,
    on: bool,
    departed: bool,
    rng: ChaCha12Rng,
    /// Completion-event generation per instance. A JobComplete event whose
    /// generation does not match is stale (the job was paused or evicted
    /// after it was armed) and is dropped.
    gen: BTreeMap<InstanceId, u64>,
    /// Accrual basis: when each running instance last had progress added.
    last_accrue: BTreeMap<InstanceId, SimTime>,
    exec: BTreeMap<InstanceId, ExecTotals>,
    /// Device-seconds delivered per project since the last accounting pass.
    delivered: BTreeMap<ProjectId, f64>,
    /// When the standing periodic RPC event fires; wakeup RPCs scheduled
    /// earlier than this must not spawn another chain.
    next_periodic_rpc: SimTime,
    /// Report-margin wakeup already queued at this time, if any.
    report_wake: Option<SimTime>,
}

impl SimClient {
    fn bump(&mut self, instance: InstanceId) {
        *self.gen.entry(instance).or_insert(0) += 1;
    }
}

struct Engine<'t> {
    now: SimTime,
    end: SimTime,
    queue: EventQueue,
    server: ServerState,
    clients: BTreeMap<HostId, SimClient>,
    catalog: Vec<CatalogProject>,
    project_names: BTreeMap<ProjectId, String>,
    comparators: BTreeMap<AppId, Comparator>,
    /// Wrong-digest offset unit per app, at least 10x the comparator
    /// tolerance so distinct wrong results never validate together.
    tol_unit: BTreeMap<AppId, f64>,
    version_app: BTreeMap<AppVersionId, AppId>,
    streams: Vec<StreamState>,
    stream_rng: ChaCha12Rng,
    truth: BTreeMap<JobId, JobTruth>,
    batches: Vec<BatchTrack>,
    job_batch: BTreeMap<JobId, usize>,
    sampler: OutcomeSampler,
    acc: MetricsAcc,
    churn: ChurnModel,
    /// Hosts gone for good, removed from the server at the next metrics
    /// tick. Their in-flight instances resolve by deadline timeout.
    pending_departures: Vec<HostId>,
    duration_days: f64,
    /// Jobs with id at or below this are excluded from the tail
    /// replication-overhead metric.
    overhead_warmup: u64,
    edf_enabled: bool,
    rpc_period: f64,
    feeder_period: f64,
    metrics_period: f64,
    trace: &'t mut Trace,
}

impl<'t> Engine<'t> {
    fn new(sc: &Scenario, trace: &'t mut Trace) -> Result<Engine<'t>, ConfigError> {
        // Identifiers follow config order so runs are reproducible.
        let mut app_policies = Vec::new();
        let mut catalog = Vec::new();
        let mut comparators = BTreeMap::new();
        let mut tol_unit = BTreeMap::new();
        let mut version_app = BTreeMap::new();
        let mut project_names = BTreeMap::new();
        let mut shares = Vec::new();
        let mut streams = Vec::new();
        let mut next_app = 0u32;
        let mut next_version = 0u32;
        for (pi, pc) in sc.projects.iter().enumerate() {
            let pid = ProjectId(pi as u32);
            project_names.insert(pid, pc.name.clone());
            shares.push((pid, pc.share));
            let mut cat_apps = Vec::new();
            let mut first_app = None;
            let mut stream_app = None;
            for ac in &pc.apps {
                let aid = AppId(next_app);
                next_app += 1;
                let mut versions = Vec::new();
                for vc in &ac.versions {
                    let vid = AppVersionId(next_version);
                    next_version += 1;
                    let mut usage = BTreeMap::new();
                    if vc.cpu_usage > 0.0 {
                        usage.insert(ResourceKind::Cpu, vc.cpu_usage);
                    }
                    if let Some(kind) = &vc.gpu_kind {
                        usage.insert(ResourceKind::Gpu(kind.clone()), vc.gpu_usage);
                    }
                    versions.push(AppVersion {
                        id: vid,
                        app: aid,
                        resource_usage: usage,
                        compat: Compatibility {
                            os_allow: vc.os_allow.clone(),
                            min_gpu_driver: vc.min_gpu_driver,
                        },
                    });
                    version_app.insert(vid, aid);
                }
                let keywords: BTreeSet<String> = ac.keywords.iter().cloned().collect();
                comparators.insert(aid, ac.comparator);
                let tol = match ac.comparator {
                    Comparator::Bitwise => 1e-6,
                    Comparator::Fuzzy { tolerance } => tolerance.max(1e-6),
                };
                tol_unit.insert(aid, 10.0 * tol);
                if first_app.is_none() {
                    first_app = Some(aid);
                }
                if !pc.jobs.app.is_empty() && pc.jobs.app == ac.name {
                    stream_app = Some(aid);
                }
                app_policies.push(AppPolicy {
                    id: aid,
                    project: pid,
                    comparator: ac.comparator,
                    versions: versions.clone(),
                    keywords: keywords.clone(),
                });
                cat_apps.push(CatalogApp { keywords, versions });
            }
            catalog.push(CatalogProject {
                id: pid,
                apps: cat_apps,
            });
            let app = if pc.jobs.app.is_empty() {
                first_app
            } else {
                stream_app
            };
            let Some(app) = app else {
                return Err(ConfigError::Invalid {
                    path: format!("projects[{pi}].jobs.app"),
                    msg: "no app by that name in this project".into(),
                });
            };
            streams.push(StreamState {
                project: pid,
                app,
                cfg: pc.jobs.clone(),
                next_at: SimTime::ZERO,
                remaining: pc.jobs.total_jobs,
            });
        }

        let mut server_rng = ChaCha12Rng::seed_from_u64(sc.seed);
        server_rng.set_stream(0);
        let mut fleet_rng = ChaCha12Rng::seed_from_u64(sc.seed);
        fleet_rng.set_stream(1);
        let mut stream_rng = ChaCha12Rng::seed_from_u64(sc.seed);
        stream_rng.set_stream(2);

        let server = ServerState::new(sc.policy.to_server_policy(), app_policies, &shares, server_rng);
        let churn = ChurnModel {
            mean_on_seconds: sc.hosts.mean_on_seconds,
            mean_off_seconds: sc.hosts.mean_off_seconds,
            departure_rate: sc.hosts.departure_rate,
        };

        let mut engine = Engine {
            now: SimTime::ZERO,
            end: SimTime::from_secs_f64(sc.duration_days * 86_400.0),
            queue: EventQueue::default(),
            server,
            clients: BTreeMap::new(),
            catalog,
            project_names,
            comparators,
            tol_unit,
            version_app,
            streams,
            stream_rng,
            truth: BTreeMap::new(),
            batches: Vec::new(),
            job_batch: BTreeMap::new(),
            sampler: OutcomeSampler::new(sc.hosts.reliability.collusion),
            acc: MetricsAcc::default(),
            churn,
            pending_departures: Vec::new(),
            duration_days: sc.duration_days,
            overhead_warmup: sc.overhead_warmup_jobs,
            edf_enabled: sc.policy.edf_enabled,
            rpc_period: sc.policy.rpc_period_seconds,
            feeder_period: sc.policy.feeder_period_seconds,
            metrics_period: sc.policy.metrics_period_seconds,
            trace,
        };

        engine.queue.push(SimTime::ZERO, Event::FeederTick);
        engine
            .queue
            .push(SimTime::from_secs_f64(engine.metrics_period), Event::MetricsTick);

        let rpc_ms = SimTime::from_secs_f64(engine.rpc_period).as_millis().max(1);
        let cp_ms = SimTime::from_secs_f64(CHECKPOINT_INTERVAL_SECS).as_millis().max(1);
        for host in build_hosts(&sc.hosts, &mut fleet_rng) {
            let i = u64::from(host.id.0);
            let mut rng = ChaCha12Rng::seed_from_u64(sc.seed);
            rng.set_stream(100 + i);
            let prefs = ComputingPrefs {
                n_usable_cpus: if sc.client.n_usable_cpus > 0.0 {
                    sc.client.n_usable_cpus
                } else {
                    host.cpu().instances as f64
                },
                max_ram_fraction: sc.client.max_ram_fraction,
                throttle_duty_cycle: sc.client.throttle_duty_cycle,
                buffer_lo_seconds: sc.client.buffer_lo_seconds,
                buffer_hi_seconds: sc.client.buffer_hi_seconds,
            };
            let state = ClientState::new(host.id, prefs, &shares);
            engine.server.register_host(host.clone());

            // Stagger periodic events so the fleet does not tick in lockstep.
            let first_rpc = SimTime(i * 1_000 % rpc_ms);
            engine.queue.push(first_rpc, Event::Rpc(host.id));
            engine
                .queue
                .push(SimTime(i * 1_000 % cp_ms), Event::CheckpointTick(host.id));

            let mut client = SimClient {
                state,
                on: true,
                departed: false,
                rng,
                gen: BTreeMap::new(),
                last_accrue: BTreeMap::new(),
                exec: BTreeMap::new(),
                delivered: BTreeMap::new(),
                next_periodic_rpc: first_rpc,
                report_wake: None,
                host,
            };
            if !engine.churn.always_on() {
                let on_len = engine.churn.sample_on(&mut client.rng);
                engine
                    .queue
                    .push(engine.now.after_secs_f64(on_len), Event::HostOff(client.host.id));
            }
            if let Some(t) = engine.churn.sample_departure(&mut client.rng) {
                engine
                    .queue
                    .push(engine.now.after_secs_f64(t), Event::HostDeparted(client.host.id));
            }
            engine.clients.insert(client.host.id, client);
        }
        Ok(engine)
    }

    fn run_loop(&mut self) {
        while let Some((t, ev)) = self.queue.pop() {
            if t > self.end {
                break;
            }
            debug_assert!(t >= self.now, "event time regressed");
            self.now = t;
            self.dispatch(ev);
        }
    }

    fn dispatch(&mut self, ev: Event) {
        match ev {
            Event::FeederTick => self.on_feeder_tick(),
            Event::MetricsTick => self.on_metrics_tick(),
            Event::Rpc(h) => self.on_rpc(h),
            Event::CheckpointTick(h) => self.on_checkpoint_tick(h),
            Event::HostOn(h) => self.on_host_on(h),
            Event::HostOff(h) => self.on_host_off(h),
            Event::HostDeparted(h) => self.on_host_departed(h),
            Event::JobComplete {
                host,
                instance,
                gen,
            } => self.on_job_complete(host, instance, gen),
            Event::Deadline { job, instance } => {
                if self.server.on_instance_deadline(job, instance, self.now, self.trace) {
                    self.acc.deadline_misses += 1;
                    self.post_server_sync(job);
                }
            }
        }
    }

    // ---- job streams ----

    fn on_feeder_tick(&mut self) {
        for si in 0..self.streams.len() {
            while self.streams[si].due(self.now) {
                self.submit_batch(si);
                let s = &mut self.streams[si];
                s.next_at = s.next_at.after_secs_f64(s.cfg.batch_interval_seconds);
            }
        }
        self.server.feeder_tick();
        let next = self.now.after_secs_f64(self.feeder_period);
        self.queue.push(next, Event::FeederTick);
    }

    fn submit_batch(&mut self, si: usize) {
        let cfg = self.streams[si].cfg.clone();
        let project = self.streams[si].project;
        let app = self.streams[si].app;
        let n = match self.streams[si].remaining {
            Some(rem) => (cfg.batch_size as u64).min(rem) as u32,
            None => cfg.batch_size,
        };
        if n == 0 {
            return;
        }
        let ests: Vec<f64> = (0..n)
            .map(|_| self.stream_rng.sample_dist(&cfg.est_flop_count))
            .collect();
        let classes = size_classes(&ests, cfg.size_class);
        let bi = self.batches.len();
        self.batches.push(BatchTrack {
            total: n,
            done: 0,
            submitted: self.now,
        });
        for k in 0..n as usize {
            let est = ests[k];
            let factor = self.stream_rng.sample_dist(&cfg.true_flop_factor);
            let max_flop = est * cfg.max_flop_factor;
            let spec = JobSpec {
                app,
                submitter: project,
                est_flop_count: est,
                max_flop_count: max_flop,
                est_wss_bytes: cfg.est_wss_bytes,
                disk_bound_bytes: cfg.disk_bound_bytes,
                delay_bound_seconds: cfg.delay_bound_seconds,
                min_quorum: cfg.min_quorum,
                init_ninstances: cfg.init_ninstances,
                max_error_instances: cfg.max_error_instances,
                max_success_instances: cfg.max_success_instances,
                keywords: cfg.keywords.clone(),
                input_files: cfg.input_files.clone(),
                size_class: classes[k],
            };
            let id = self
                .server
                .submit_job(spec, self.now, self.trace)
                .expect("stream spec passed scenario validation");
            self.truth.insert(
                id,
                JobTruth {
                    true_flop: est * factor,
                    max_flop,
                },
            );
            self.job_batch.insert(id, bi);
            self.acc.jobs_submitted += 1;
        }
        if let Some(rem) = &mut self.streams[si].remaining {
            *rem -= n as u64;
        }
    }

    // ---- periodic server work ----

    fn on_metrics_tick(&mut self) {
        for h in std::mem::take(&mut self.pending_departures) {
            self.server.hosts.remove(&h);
        }
        self.server.purge_pass(self.now, self.trace);
        self.trace.emit(
            self.now,
            "metrics_tick",
            &[
                ("dispatched", Value::U(self.server.dispatch_count)),
                ("failed", Value::U(self.acc.failed)),
                ("succeeded", Value::U(self.acc.succeeded)),
            ],
        );
        let next = self.now.after_secs_f64(self.metrics_period);
        self.queue.push(next, Event::MetricsTick);
    }

    // ---- host lifecycle ----

    fn on_host_on(&mut self, h: HostId) {
        let Some(mut c) = self.clients.remove(&h) else {
            return;
        };
        if c.departed || c.on {
            self.clients.insert(h, c);
            return;
        }
        c.state.note_availability_segment(self.now, false);
        c.on = true;
        self.trace.emit(self.now, "host_on", &[("host", Value::U(u64::from(h.0)))]);
        // Resume running tasks: progress restarts accruing now, and each
        // needs a fresh completion event.
        let running: Vec<InstanceId> = c
            .state
            .jobs
            .iter()
            .filter(|j| j.is_running())
            .map(|j| j.instance)
            .collect();
        for i in running {
            c.last_accrue.insert(i, self.now);
            self.arm_completion(&mut c, i);
        }
        let on_len = self.churn.sample_on(&mut c.rng);
        self.queue.push(self.now.after_secs_f64(on_len), Event::HostOff(h));
        self.clients.insert(h, c);
        self.client_pass(h, true);
    }

    fn on_host_off(&mut self, h: HostId) {
        let Some(mut c) = self.clients.remove(&h) else {
            return;
        };
        if c.departed || !c.on {
            self.clients.insert(h, c);
            return;
        }
        self.accrue_all(&mut c);
        c.state.note_availability_segment(self.now, true);
        c.on = false;
        // Execution pauses: invalidate armed completions. State is kept, so
        // progress resumes from where it stopped (suspend, not crash).
        let running: Vec<InstanceId> = c
            .state
            .jobs
            .iter()
            .filter(|j| j.is_running())
            .map(|j| j.instance)
            .collect();
        for i in running {
            c.bump(i);
        }
        self.trace.emit(self.now, "host_off", &[("host", Value::U(u64::from(h.0)))]);
        let off_len = self.churn.sample_off(&mut c.rng);
        self.queue.push(self.now.after_secs_f64(off_len), Event::HostOn(h));
        self.clients.insert(h, c);
    }

    fn on_host_departed(&mut self, h: HostId) {
        let Some(mut c) = self.clients.remove(&h) else {
            return;
        };
        if c.departed {
            self.clients.insert(h, c);
            return;
        }
        if c.on {
            self.accrue_all(&mut c);
        }
        c.departed = true;
        c.on = false;
        let held: Vec<InstanceId> = c.state.jobs.iter().map(|j| j.instance).collect();
        for i in held {
            c.bump(i);
        }
        self.trace
            .emit(self.now, "host_departed", &[("host", Value::U(u64::from(h.0)))]);
        self.acc.hosts_departed += 1;
        self.pending_departures.push(h);
        self.clients.insert(h, c);
    }

    // ---- client passes ----

    fn on_rpc(&mut self, h: HostId) {
        let Some(c) = self.clients.get(&h) else {
            return;
        };
        if c.departed {
            return;
        }
        if c.on {
            self.client_pass(h, true);
        }
        // Only the standing periodic event re-chains; wakeups fired early
        // would otherwise spawn chains of their own.
        let Some(c) = self.clients.get_mut(&h) else {
            return;
        };
        if self.now >= c.next_periodic_rpc {
            let next = self.now.after_secs_f64(self.rpc_period);
            c.next_periodic_rpc = next;
            self.queue.push(next, Event::Rpc(h));
        }
    }

    fn on_checkpoint_tick(&mut self, h: HostId) {
        let Some(mut c) = self.clients.remove(&h) else {
            return;
        };
        if c.departed {
            self.clients.insert(h, c);
            return;
        }
        if c.on {
            self.accrue_all(&mut c);
            let running: Vec<InstanceId> = c
                .state
                .jobs
                .iter()
                .filter(|j| j.is_running())
                .map(|j| j.instance)
                .collect();
            for i in running {
                if on_checkpoint(&mut c.state, i, self.now) {
                    // Evicted at its checkpoint; the device is free.
                    c.bump(i);
                }
            }
            self.schedule_cycle(&mut c);
        }
        let next = self.now.after_secs_f64(CHECKPOINT_INTERVAL_SECS);
        self.queue.push(next, Event::CheckpointTick(h));
        self.clients.insert(h, c);
    }

    /// One full client pass: catch up progress, drop expired work, account
    /// allocation, optionally talk to projects, rescheduled what runs.
    fn client_pass(&mut self, h: HostId, do_rpc: bool) {
        let Some(mut c) = self.clients.remove(&h) else {
            return;
        };
        if c.departed || !c.on {
            self.clients.insert(h, c);
            return;
        }
        self.accrue_all(&mut c);
        self.prune_expired(&mut c);
        c.state.note_availability_segment(self.now, true);
        let delivered = std::mem::take(&mut c.delivered);
        c.state.account_usage(self.now, &delivered);
        if do_rpc {
            self.rpc_cycle(&mut c);
        }
        self.schedule_cycle(&mut c);
        // Arm a wakeup for the earliest report margin, once per distinct
        // margin time.
        if let Some(rb) = next_report_deadline(&c.state) {
            let at = rb.max(SimTime(self.now.0 + 1));
            if c.report_wake != Some(at) {
                c.report_wake = Some(at);
                self.queue.push(at, Event::Rpc(h));
            }
        }
        self.clients.insert(h, c);
    }

    /// Drop suspended tasks whose deadline already passed; the server has
    /// timed them out, so finishing them would be wasted work. A running
    /// task is left alone: it completes and reports late.
    fn prune_expired(&mut self, c: &mut SimClient) {
        let expired: Vec<(InstanceId, JobId)> = c
            .state
            .jobs
            .iter()
            .filter(|j| !j.is_running() && self.now > j.deadline)
            .map(|j| (j.instance, j.job))
            .collect();
        for (i, job) in expired {
            c.state.remove_job(i);
            c.exec.remove(&i);
            c.last_accrue.remove(&i);
            c.bump(i);
            self.trace.emit(
                self.now,
                "task_dropped",
                &[
                    ("host", Value::U(u64::from(c.host.id.0))),
                    ("instance", Value::U(i.0)),
                    ("job", Value::U(job.0)),
                ],
            );
        }
    }

    // ---- execution model ----

    /// Add progress to every running task up to `now`. One raw compute
    /// second accrues per wall second times the throttle duty cycle;
    /// allocation accounting sees full device occupancy.
    fn accrue_all(&mut self, c: &mut SimClient) {
        if !c.on {
            return;
        }
        let duty = c.state.prefs.throttle_duty_cycle;
        for j in c.state.jobs.iter_mut() {
            if !j.is_running() {
                continue;
            }
            let last = c.last_accrue.get(&j.instance).copied().unwrap_or(self.now);
            let dt = self.now.saturating_sub(last).as_secs_f64();
            if dt <= 0.0 {
                continue;
            }
            c.last_accrue.insert(j.instance, self.now);
            let exec = c.exec[&j.instance];
            let add = (dt * duty).min((exec.total() - j.elapsed_raw).max(0.0));
            j.elapsed_raw += add;
            j.fraction_done = (j.elapsed_raw / exec.true_raw).min(1.0);
            let usage_sum: f64 = j.usage.values().sum();
            let devsec = dt * usage_sum;
            *c.delivered.entry(j.project).or_insert(0.0) += devsec;
            *self.acc.compute.entry(j.project).or_insert(0.0) += devsec;
        }
    }

    /// Arm the completion event for a task that just started running.
    /// Requires accruals to be current.
    fn arm_completion(&mut self, c: &mut SimClient, instance: InstanceId) {
        let gen = {
            let g = c.gen.entry(instance).or_insert(0);
            *g += 1;
            *g
        };
        let Some(job) = c.state.job(instance) else {
            return;
        };
        let exec = c.exec[&instance];
        let remaining_raw = (exec.total() - job.elapsed_raw).max(0.0);
        let duty = c.state.prefs.throttle_duty_cycle.max(1e-9);
        let at = self.now.after_secs_f64(remaining_raw / duty);
        self.queue.push(
            at,
            Event::JobComplete {
                host: c.host.id,
                instance,
                gen,
            },
        );
    }

    fn on_job_complete(&mut self, h: HostId, instance: InstanceId, gen: u64) {
        let Some(mut c) = self.clients.remove(&h) else {
            return;
        };
        let live = c.on
            && !c.departed
            && c.gen.get(&instance).copied() == Some(gen)
            && c.state.job(instance).is_some();
        if !live {
            self.clients.insert(h, c);
            return;
        }
        self.accrue_all(&mut c);
        let job = c.state.remove_job(instance).expect("checked above");
        let exec = c.exec.remove(&instance).expect("armed task has totals");
        c.last_accrue.remove(&instance);
        c.bump(instance);

        let app = self.version_app[&job.app_version];
        let outcome = self.sampler.sample(
            c.host.reliability,
            job.job,
            self.tol_unit[&app],
            exec.crashes(),
            &mut c.rng,
        );
        let (success, digest) = match outcome {
            Outcome::Correct(d) | Outcome::Wrong(d) => (true, Some(d)),
            Outcome::Crash => (false, None),
        };
        self.trace.emit(
            self.now,
            "job_finished",
            &[
                ("host", Value::U(u64::from(h.0))),
                ("instance", Value::U(instance.0)),
                ("job", Value::U(job.job.0)),
                ("ok", Value::U(success as u64)),
                ("runtime", Value::F(job.elapsed_raw)),
            ],
        );
        let margin = SimTime::from_secs_f64(0.1 * job.delay_bound_secs());
        c.state.pending_reports.push(PendingReport {
            instance,
            job: job.job,
            project: job.project,
            app_version: job.app_version,
            success,
            digest,
            runtime_raw: job.elapsed_raw,
            finished_at: self.now,
            report_by: job.deadline.saturating_sub(margin),
        });
        self.clients.insert(h, c);
        // The freed device may admit queued work, and the report may be
        // urgent; run a full pass.
        self.client_pass(h, true);
    }

    // ---- scheduling ----

    fn schedule_cycle(&mut self, c: &mut SimClient) {
        let prev_running: BTreeSet<InstanceId> = c
            .state
            .jobs
            .iter()
            .filter(|j| j.is_running())
            .map(|j| j.instance)
            .collect();
        let plan = schedule(&c.state, &c.host, self.now, self.edf_enabled);
        apply_schedule(&mut c.state, &plan, self.now);
        for &i in &plan.preempt_now {
            c.bump(i);
        }
        for &i in &plan.run {
            if !prev_running.contains(&i) {
                c.last_accrue.insert(i, self.now);
                self.arm_completion(c, i);
            }
        }
        if self.trace.enabled() && (!plan.start.is_empty() || !plan.preempt_now.is_empty()) {
            let run = if plan.run.is_empty() {
                "none".to_string()
            } else {
                plan.run
                    .iter()
                    .map(|i| i.0.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            };
            self.trace.emit(
                self.now,
                "sched_pass",
                &[
                    ("host", Value::U(u64::from(c.host.id.0))),
                    ("run", Value::S(run)),
                ],
            );
        }
    }

    // ---- RPC ----

    fn rpc_cycle(&mut self, c: &mut SimClient) {
        let mut contacted: BTreeSet<ProjectId> = BTreeSet::new();
        for _ in 0..MAX_FETCH_ROUNDS {
            let Some(wr) = work_fetch(&c.state, &c.host, &self.catalog, self.now) else {
                break;
            };
            let project = wr.project;
            self.send_rpc(c, project, Some(wr));
            contacted.insert(project);
        }
        for project in report_now(&c.state, self.now) {
            if contacted.contains(&project) {
                continue;
            }
            let wr = piggyback_request(&c.state, &c.host, &self.catalog, project, self.now);
            self.send_rpc(c, project, wr);
        }
    }

    /// One synchronous RPC to `project`: deliver its pending reports, maybe
    /// ask for work, absorb the reply.
    fn send_rpc(
        &mut self,
        c: &mut SimClient,
        project: ProjectId,
        work: Option<crate::client::fetch::WorkRequest>,
    ) -> bool {
        let (for_project, kept): (Vec<PendingReport>, Vec<PendingReport>) =
            std::mem::take(&mut c.state.pending_reports)
                .into_iter()
                .partition(|r| r.project == project);
        c.state.pending_reports = kept;
        if c.report_wake.is_some() && c.state.pending_reports.is_empty() {
            c.report_wake = None;
        }
        let host_u = u64::from(c.host.id.0);
        for r in &for_project {
            self.trace.emit(
                self.now,
                "report",
                &[
                    ("host", Value::U(host_u)),
                    ("instance", Value::U(r.instance.0)),
                    ("job", Value::U(r.job.0)),
                    ("ok", Value::U(r.success as u64)),
                    ("project", Value::U(u64::from(project.0))),
                ],
            );
        }
        if let Some(wr) = &work {
            for (kind, rr) in &wr.resources {
                self.trace.emit(
                    self.now,
                    "work_request",
                    &[
                        ("host", Value::U(host_u)),
                        ("idle", Value::U(rr.req_idle as u64)),
                        ("project", Value::U(u64::from(project.0))),
                        ("queue", Value::F(rr.queue_dur_seconds)),
                        ("resource", Value::S(kind.to_string())),
                        ("runtime", Value::F(rr.req_runtime_seconds)),
                    ],
                );
            }
        }
        let reports: Vec<InstanceReport> = for_project
            .iter()
            .map(|r| InstanceReport {
                job: r.job,
                instance: r.instance,
                outcome: if r.success {
                    ReportOutcome::Success {
                        digest: r.digest.clone().expect("successful report has a digest"),
                        runtime: r.runtime_raw,
                    }
                } else {
                    ReportOutcome::Error
                },
            })
            .collect();
        let asked = work.is_some();
        let req = RpcRequest {
            host: c.host.clone(),
            availability: c.state.availability,
            duty_cycle: c.state.prefs.throttle_duty_cycle,
            reports,
            work,
        };
        let reply = self.server.handle_request(&req, self.now, self.trace);
        for r in &for_project {
            self.post_server_sync(r.job);
        }
        let got = !reply.jobs.is_empty();
        for a in reply.jobs {
            self.add_assignment(c, a);
        }
        if asked {
            if let Some(delay) = on_rpc_result(&mut c.state, project, got, self.now, &mut c.rng) {
                let count = c
                    .state
                    .backoff
                    .get(&project)
                    .map_or(0, |b| b.consecutive_failures);
                self.trace.emit(
                    self.now,
                    "backoff",
                    &[
                        ("count", Value::U(count as u64)),
                        ("delay", Value::F(delay)),
                        ("host", Value::U(host_u)),
                        ("project", Value::U(u64::from(project.0))),
                    ],
                );
            }
        }
        got
    }

    fn add_assignment(&mut self, c: &mut SimClient, a: crate::server::JobAssignment) {
        let truth = self.truth[&a.job];
        let peak: f64 = a
            .usage
            .iter()
            .map(|(kind, amt)| {
                amt * c
                    .host
                    .resource(kind)
                    .expect("dispatch checked compatibility")
                    .peak_flops
            })
            .sum();
        let eff_peak = (c.host.efficiency * peak).max(1e-9);
        c.exec.insert(
            a.instance,
            ExecTotals {
                true_raw: truth.true_flop / eff_peak,
                abort_raw: truth.max_flop / eff_peak,
            },
        );
        let created = self.server.jobs[&a.job].created_at;
        self.acc
            .latencies
            .push(self.now.saturating_sub(created).as_secs_f64());
        let arrival_seq = c.state.next_arrival_seq();
        c.state.jobs.push(ClientJob {
            instance: a.instance,
            job: a.job,
            project: a.project,
            app_version: a.version,
            usage: a.usage,
            est_wss_bytes: a.est_wss_bytes,
            disk_bound_bytes: a.disk_bound_bytes,
            static_total_raw: a.est_runtime_raw,
            fraction_done: 0.0,
            accurate_fraction: true,
            elapsed_raw: 0.0,
            deadline: a.deadline,
            received: self.now,
            arrival_seq,
            state: RunState::Unstarted,
            never_checkpointed: true,
            slice_started: self.now,
            last_checkpoint: None,
            preempt_pending: false,
        });
        self.queue.push(
            a.deadline,
            Event::Deadline {
                job: a.job,
                instance: a.instance,
            },
        );
    }

    // ---- bookkeeping after any server-side transition ----

    /// Fold a job's terminal transition into the metrics, once. Safe to call
    /// any time; does nothing while the job is still active.
    fn post_server_sync(&mut self, job_id: JobId) {
        let Some(job) = self.server.jobs.get(&job_id) else {
            return;
        };
        match job.state {
            JobState::Active => {}
            JobState::Success { canonical } => {
                let Some(bi) = self.job_batch.remove(&job_id) else {
                    return;
                };
                self.acc.succeeded += 1;
                let comparator = self.comparators[&job.spec.app];
                let honest = honest_digest(job_id);
                let canon_digest = job.instance(canonical).and_then(|i| i.digest.as_ref());
                if let Some(d) = canon_digest {
                    if !equivalent(d, &honest, comparator) {
                        self.acc.wrong_accepted += 1;
                        self.trace.emit(
                            self.now,
                            "wrong_accept",
                            &[
                                ("job", Value::U(job_id.0)),
                                ("canonical", Value::U(canonical.0)),
                            ],
                        );
                    }
                }
                let dispatched = job
                    .instances
                    .iter()
                    .filter(|i| i.dispatched_at.is_some())
                    .count() as u64;
                self.acc.overhead_all.0 += dispatched;
                self.acc.overhead_all.1 += 1;
                if job_id.0 > self.overhead_warmup {
                    self.acc.overhead_tail.0 += dispatched;
                    self.acc.overhead_tail.1 += 1;
                }
                self.truth.remove(&job_id);
                self.finish_batch_member(bi);
            }
            JobState::Failed { .. } => {
                let Some(bi) = self.job_batch.remove(&job_id) else {
                    return;
                };
                self.acc.failed += 1;
                self.truth.remove(&job_id);
                self.finish_batch_member(bi);
            }
        }
    }

    fn finish_batch_member(&mut self, bi: usize) {
        let b = &mut self.batches[bi];
        b.done += 1;
        if b.done == b.total {
            self.acc
                .turnarounds
                .push(self.now.saturating_sub(b.submitted).as_secs_f64());
        }
    }

    fn finish(mut self) -> Metrics {
        self.now = self.end;
        let hosts: Vec<HostId> = self.clients.keys().copied().collect();
        for h in hosts {
            let Some(mut c) = self.clients.remove(&h) else {
                continue;
            };
            if c.on && !c.departed {
                self.accrue_all(&mut c);
                c.state.note_availability_segment(self.now, true);
            }
            self.clients.insert(h, c);
        }
        self.acc.finish(
            self.duration_days,
            self.server.dispatch_count,
            &self.server.credit.by_project,
            &self.project_names,
        )
    }
}

/// Per-batch size classes: terciles of the FLOP estimates, unless the
/// stream pins one class.
fn size_classes(ests: &[f64], fixed: Option<u8>) -> Vec<u8> {
    if let Some(sc) = fixed {
        return vec![sc; ests.len()];
    }
    let n = ests.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| ests[a].total_cmp(&ests[b]));
    let mut out = vec![0u8; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = (rank * 3 / n) as u8;
    }
    out
}

/// Sampling helper so call sites read as draws from the configured
/// distribution.
trait SampleDist {
    fn sample_dist(&mut self, d: &crate::sim::scenario::Dist) -> f64;
}

impl SampleDist for ChaCha12Rng {
    fn sample_dist(&mut self, d: &crate::sim::scenario::Dist) -> f64 {
        d.sample(self)
    }
}
