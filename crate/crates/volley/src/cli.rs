//! Command-line front end: run scenarios, benchmark the dispatcher, diff
//! run reports. Exit codes: 0 success, 1 bad input or config, 2 runtime
//! failure (I/O).

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::client::fetch::{ResourceRequest, WorkRequest};
use crate::domain::{
    AppId, AppVersion, AppVersionId, Compatibility, Host, HostId, JobSpec, ProcessingResource,
    ProjectId, ReliabilityProfile, ResourceKind, SimTime,
};
use crate::report::{compare_reports, RunReport};
use crate::server::{AppPolicy, RpcRequest, ServerPolicy, ServerState};
use crate::sim::{self, parse_with_overrides};
use crate::trace::Trace;
use crate::validation::Comparator;

#[derive(Debug, Parser)]
#[command(name = "volley", version, about = "Volunteer-computing scheduling simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Simulate a scenario config and write metrics and a run report.
    Run {
        /// Scenario TOML file.
        config: PathBuf,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the event trace to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Directory for metrics.txt and report.json.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Override a config key, dotted path: --set policy.edf_enabled=false
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Measure dispatch throughput against a synthetic backlog.
    BenchDispatch {
        #[arg(long, default_value_t = 1_000)]
        hosts: u32,
        #[arg(long, default_value_t = 100_000)]
        jobs: u64,
        /// Time budget for the measurement loop.
        #[arg(long, default_value_t = 5.0)]
        secs: f64,
    },
    /// Print per-metric deltas between two run reports.
    Compare { a: PathBuf, b: PathBuf },
}

/// Dispatch a parsed command line; returns the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    match cli.cmd {
        Cmd::Run {
            config,
            seed,
            trace,
            out,
            set,
        } => cmd_run(&config, seed, trace.as_deref(), &out, &set),
        Cmd::BenchDispatch { hosts, jobs, secs } => cmd_bench_dispatch(hosts, jobs, secs),
        Cmd::Compare { a, b } => cmd_compare(&a, &b),
    }
}

fn cmd_run(
    config: &Path,
    seed: Option<u64>,
    trace_path: Option<&Path>,
    out: &Path,
    set: &[String],
) -> i32 {
    let text = match fs::read_to_string(config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", config.display());
            return 1;
        }
    };
    let mut overrides: Vec<(String, String)> = Vec::new();
    for s in set {
        match s.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => {
                overrides.push((k.trim().to_string(), v.trim().to_string()));
            }
            _ => {
                eprintln!("error: --set expects KEY=VALUE, got {s:?}");
                return 1;
            }
        }
    }
    if let Some(seed) = seed {
        overrides.push(("seed".to_string(), seed.to_string()));
    }
    let scenario = match parse_with_overrides(&text, &overrides) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let mut trace = match trace_path {
        Some(p) => match Trace::to_file(p) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("error: cannot create trace file {}: {e}", p.display());
                return 2;
            }
        },
        None => Trace::null(),
    };
    let started = Instant::now();
    let metrics = match sim::run(&scenario, &mut trace) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let doc = metrics.to_document();
    print!("{doc}");
    let report = RunReport {
        scenario_digest: scenario.digest(),
        seed: scenario.seed,
        policy: scenario.policy.clone(),
        metrics,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    if let Err(e) = fs::create_dir_all(out) {
        eprintln!("error: cannot create {}: {e}", out.display());
        return 2;
    }
    if let Err(e) = fs::write(out.join("metrics.txt"), &doc) {
        eprintln!("error: cannot write metrics.txt: {e}");
        return 2;
    }
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    if let Err(e) = fs::write(out.join("report.json"), json) {
        eprintln!("error: cannot write report.json: {e}");
        return 2;
    }
    0
}

fn bench_host(i: u32) -> Host {
    Host {
        id: HostId(i),
        resources: vec![ProcessingResource {
            kind: ResourceKind::Cpu,
            instances: 4,
            peak_flops: 1e9,
            availability: 1.0,
            driver_version: 0,
        }],
        os_tag: "linux".into(),
        cpu_vendor_tag: "acme".into(),
        cpu_model_tag: "core9".into(),
        ram_bytes: 8 << 30,
        free_disk_bytes: 1 << 40,
        efficiency: 1.0,
        reliability: ReliabilityProfile::Honest,
        keyword_yes: BTreeSet::new(),
        keyword_no: BTreeSet::new(),
        sticky_files: BTreeSet::new(),
    }
}

fn cmd_bench_dispatch(hosts: u32, jobs: u64, secs: f64) -> i32 {
    let project = ProjectId(0);
    let app_id = AppId(0);
    let app = AppPolicy {
        id: app_id,
        project,
        comparator: Comparator::Bitwise,
        versions: vec![AppVersion {
            id: AppVersionId(0),
            app: app_id,
            resource_usage: [(ResourceKind::Cpu, 1.0)].into(),
            compat: Compatibility::default(),
        }],
        keywords: BTreeSet::new(),
    };
    let mut server = ServerState::new(
        ServerPolicy::default(),
        vec![app],
        &[(project, 1.0)],
        ChaCha12Rng::seed_from_u64(0),
    );
    let mut trace = Trace::null();
    for _ in 0..jobs {
        server
            .submit_job(
                JobSpec {
                    app: app_id,
                    submitter: project,
                    est_flop_count: 3.6e12,
                    max_flop_count: 3.6e13,
                    est_wss_bytes: 1_000_000,
                    disk_bound_bytes: 1_000_000,
                    delay_bound_seconds: 1e7,
                    min_quorum: 1,
                    init_ninstances: 1,
                    max_error_instances: 3,
                    max_success_instances: 6,
                    keywords: vec![],
                    input_files: vec![],
                    size_class: 1,
                },
                SimTime::ZERO,
                &mut trace,
            )
            .expect("bench spec is well formed");
    }
    server.feeder_tick();
    let fleet: Vec<Host> = (0..hosts.max(1)).map(bench_host).collect();
    for h in &fleet {
        server.register_host(h.clone());
    }

    let started = Instant::now();
    let mut dispatched: u64 = 0;
    let mut turn = 0usize;
    let mut now = SimTime::ZERO;
    while started.elapsed().as_secs_f64() < secs && dispatched < jobs {
        let host = &fleet[turn % fleet.len()];
        turn += 1;
        now = SimTime(now.0 + 1);
        let req = RpcRequest {
            host: host.clone(),
            availability: 1.0,
            duty_cycle: 1.0,
            reports: vec![],
            work: Some(WorkRequest {
                project,
                resources: [(
                    ResourceKind::Cpu,
                    ResourceRequest {
                        req_runtime_seconds: 57_600.0,
                        req_idle: 4,
                        queue_dur_seconds: 0.0,
                    },
                )]
                .into(),
            }),
        };
        let reply = server.handle_request(&req, now, &mut trace);
        dispatched += reply.jobs.len() as u64;
        let refilled = server.feeder_tick();
        if reply.jobs.is_empty() && refilled == 0 {
            break;
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    let rate = if dispatched > 0 && elapsed > 0.0 {
        dispatched as f64 / elapsed
    } else {
        0.0
    };
    println!("hosts = {hosts}");
    println!("jobs = {jobs}");
    println!("dispatched = {dispatched}");
    println!("elapsed_seconds = {elapsed:.3}");
    println!("instances_per_second = {rate:.0}");
    0
}

fn read_report(path: &Path) -> Result<RunReport, String> {
    let text =
        fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("bad run report {}: {e}", path.display()))
}

fn cmd_compare(a: &Path, b: &Path) -> i32 {
    let ra = match read_report(a) {
        Ok(r) => r,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 1;
        }
    };
    let rb = match read_report(b) {
        Ok(r) => r,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 1;
        }
    };
    if ra.scenario_digest != rb.scenario_digest {
        eprintln!(
            "warning: comparing runs of different scenarios ({} vs {})",
            &ra.scenario_digest[..ra.scenario_digest.len().min(12)],
            &rb.scenario_digest[..rb.scenario_digest.len().min(12)],
        );
    }
    print!("{}", compare_reports(&ra, &rb));
    0
}
