//! Host population sampling, the on/off churn model, and result outcomes
//! (honest, wrong, crash) for executed instances.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::domain::{
    Host, HostId, JobId, ProcessingResource, ReliabilityProfile, ResourceKind,
};
use crate::validation::Digest;

use super::scenario::HostPopulation;

/// Sample one host population. Consumes the rng in config order, so the
/// same seed and config always produce the same fleet.
pub fn build_hosts(cfg: &HostPopulation, rng: &mut ChaCha12Rng) -> Vec<Host> {
    let mut hosts = Vec::with_capacity(cfg.count as usize);
    for i in 0..cfg.count {
        let speed = cfg.speed.sample(rng);
        let efficiency = cfg.efficiency.sample(rng).clamp(0.01, 1.0);
        let os = pick(&cfg.os_tags, rng);
        let vendor = pick(&cfg.cpu_vendors, rng);
        let model = pick(&cfg.cpu_models, rng);
        let mut resources = vec![ProcessingResource {
            kind: ResourceKind::Cpu,
            instances: cfg.n_cpus,
            peak_flops: speed,
            availability: 1.0,
            driver_version: 0,
        }];
        if let Some(g) = &cfg.gpu {
            if rng.random::<f64>() < g.fraction {
                resources.push(ProcessingResource {
                    kind: ResourceKind::Gpu(g.kind.clone()),
                    instances: g.instances,
                    peak_flops: g.peak_flops,
                    availability: 1.0,
                    driver_version: g.driver_version,
                });
            }
        }
        let roll = rng.random::<f64>();
        let r = &cfg.reliability;
        let reliability = if roll < r.faulty_fraction {
            ReliabilityProfile::Faulty {
                error_prob: r.faulty_error_prob,
            }
        } else if roll < r.faulty_fraction + r.malicious_fraction {
            ReliabilityProfile::Malicious {
                wrong_prob: r.malicious_wrong_prob,
            }
        } else {
            ReliabilityProfile::Honest
        };
        hosts.push(Host {
            id: HostId(i),
            resources,
            os_tag: os,
            cpu_vendor_tag: vendor,
            cpu_model_tag: model,
            ram_bytes: cfg.ram_bytes,
            free_disk_bytes: cfg.free_disk_bytes,
            efficiency,
            reliability,
            keyword_yes: Default::default(),
            keyword_no: Default::default(),
            sticky_files: Default::default(),
        });
    }
    hosts
}

fn pick(options: &[String], rng: &mut ChaCha12Rng) -> String {
    options[rng.random_range(0..options.len())].clone()
}

/// Two-state exponential on/off process with a permanent-departure hazard.
#[derive(Debug, Clone, Copy)]
pub struct ChurnModel {
    pub mean_on_seconds: f64,
    pub mean_off_seconds: f64,
    pub departure_rate: f64,
}

impl ChurnModel {
    pub fn always_on(&self) -> bool {
        self.mean_off_seconds <= 0.0
    }

    pub fn sample_on<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        sample_exp(self.mean_on_seconds, rng)
    }

    pub fn sample_off<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        sample_exp(self.mean_off_seconds, rng)
    }

    /// Seconds until this host leaves for good, sampled once up front.
    pub fn sample_departure<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<f64> {
        if self.departure_rate <= 0.0 {
            None
        } else {
            Some(sample_exp(1.0 / self.departure_rate, rng))
        }
    }
}

fn sample_exp<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> f64 {
    // Inverse transform; 1-u keeps the argument strictly positive.
    let u: f64 = rng.random();
    -mean * (1.0 - u).ln()
}

/// Ground-truth digest value for a job, in (0.5, 1.5). Every honest host
/// lands on exactly this value.
pub fn honest_value(job: JobId) -> f64 {
    // splitmix64 finalizer as the bit mixer.
    let mut z = job.0.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^= z >> 31;
    0.5 + (z >> 11) as f64 / (1u64 << 53) as f64
}

pub fn honest_digest(job: JobId) -> Digest {
    Digest(vec![honest_value(job)])
}

/// Generates wrong digests. Each draw is offset from the honest value by a
/// distinct multiple of a unit chosen much larger than the comparator
/// tolerance, so two independent wrong results never validate against each
/// other or against the truth. With collusion on, malicious hosts all share
/// one offset instead, and CAN form a quorum together.
#[derive(Debug, Clone)]
pub struct OutcomeSampler {
    pub collusion: bool,
    counter: u64,
}

/// How one finished execution reports.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Correct(Digest),
    Wrong(Digest),
    Crash,
}

impl OutcomeSampler {
    pub fn new(collusion: bool) -> Self {
        OutcomeSampler {
            collusion,
            counter: 1, // offset 1 is reserved for the colluding digest
        }
    }

    /// `tolerance_unit` must be at least 10x the app's comparator tolerance.
    /// `crashed` reflects execution (runaway abort), which preempts the
    /// digest entirely.
    pub fn sample<R: Rng + ?Sized>(
        &mut self,
        reliability: ReliabilityProfile,
        job: JobId,
        tolerance_unit: f64,
        crashed: bool,
        rng: &mut R,
    ) -> Outcome {
        if crashed {
            return Outcome::Crash;
        }
        let honest = honest_value(job);
        let (wrong_prob, colludes) = match reliability {
            ReliabilityProfile::Honest => (0.0, false),
            ReliabilityProfile::Faulty { error_prob } => (error_prob, false),
            ReliabilityProfile::Malicious { wrong_prob } => (wrong_prob, self.collusion),
        };
        // Drawn unconditionally so a host's rng stream does not depend on
        // its own reliability profile.
        let roll: f64 = rng.random();
        if roll >= wrong_prob {
            return Outcome::Correct(Digest(vec![honest]));
        }
        let k = if colludes {
            1
        } else {
            self.counter += 1;
            self.counter
        };
        Outcome::Wrong(Digest(vec![honest + k as f64 * tolerance_unit]))
    }
}
