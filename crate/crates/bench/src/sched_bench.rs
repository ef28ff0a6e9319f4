//! Routing throughput microbenchmark: polyserve decode routing over a
//! synthetic cluster state and a fixed random decision stream.

use std::hash::{DefaultHasher, Hash, Hasher};
use std::time::Instant;

use polysim_core::capacity::Arch;
use polysim_core::perf_model::PerfModel;
use polysim_core::scheduler::{route_polyserve, Assignment, Candidate, Cluster, Resident, SchedulerConfig};
use polysim_core::MS;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub servers: usize,
    /// Residents per server are drawn from `1..=max_residents`.
    pub max_residents: usize,
    pub decisions: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            servers: 20,
            max_residents: 48,
            decisions: 200_000,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub servers: usize,
    pub decisions: usize,
    pub decisions_per_sec: f64,
    pub p50_ns: u64,
    pub p99_ns: u64,
    pub p999_ns: u64,
    pub max_ns: u64,
    /// Hash of every outcome in order; equal across repeated runs.
    pub outcome_hash: u64,
}

/// A cluster with every server assigned to a class round-robin and
/// populated with random decoding residents.
pub fn synthetic_cluster(spec: &BenchSpec, model: &PerfModel, cfg: &SchedulerConfig) -> Cluster {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut cluster = Cluster::pooled(spec.servers);
    let classes = cfg.n_classes();
    for id in 0..spec.servers {
        let class = id % classes;
        cluster.set_assignment(id, Assignment::Tier(class));
        let s = &mut cluster.servers[id];
        let n = rng.random_range(1..=spec.max_residents.max(1));
        for k in 0..n {
            let p = rng.random_range(1..=1024u64);
            let generated = rng.random_range(0..cfg.max_decode);
            let r = Resident {
                rid: (id * 1000 + k) as u32,
                p,
                generated,
                class,
                tpot_us: cfg.class_tpot(class),
                next_deadline: 0,
                prefill_left: 0,
                chunk: 0,
                reserve: cfg.reserve(p),
            };
            if s.reserved + r.reserve > model.kv_capacity() {
                break;
            }
            s.kv += r.footprint();
            s.reserved += r.reserve;
            s.residents.push(r);
        }
        s.busy_until = Some(rng.random_range(0..15 * MS));
        s.touch();
    }
    cluster
}

pub fn decision_stream(spec: &BenchSpec, cfg: &SchedulerConfig) -> Vec<Candidate> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xDEC1);
    (0..spec.decisions)
        .map(|i| {
            let class = rng.random_range(0..cfg.n_classes());
            let p = rng.random_range(1..=1024u64);
            let slack = rng.random_range(0..200 * MS);
            Candidate {
                rid: i as u32,
                p,
                class,
                tpot_us: cfg.class_tpot(class),
                ttft_deadline: slack,
                next_deadline: slack,
                reserve: cfg.reserve(p),
            }
        })
        .collect()
}

pub fn run(spec: &BenchSpec, model: &PerfModel) -> BenchReport {
    let cfg = SchedulerConfig {
        arch: Arch::Pd,
        ..SchedulerConfig::default()
    };
    let cluster = synthetic_cluster(spec, model, &cfg);
    let stream = decision_stream(spec, &cfg);
    // Warm the per-server prediction caches.
    for c in stream.iter().take(100) {
        std::hint::black_box(route_polyserve(&cluster, c, 0, model, &cfg));
    }
    let mut lat = Vec::with_capacity(stream.len());
    let mut hasher = DefaultHasher::new();
    let start = Instant::now();
    for c in &stream {
        let t = Instant::now();
        let d = std::hint::black_box(route_polyserve(&cluster, c, 0, model, &cfg));
        lat.push(t.elapsed().as_nanos() as u64);
        d.outcome.server().hash(&mut hasher);
    }
    let secs = start.elapsed().as_secs_f64();
    lat.sort_unstable();
    let pct = |q: f64| lat.get(((lat.len() as f64 * q) as usize).min(lat.len().saturating_sub(1))).copied().unwrap_or(0);
    BenchReport {
        servers: spec.servers,
        decisions: stream.len(),
        decisions_per_sec: stream.len() as f64 / secs.max(1e-9),
        p50_ns: pct(0.5),
        p99_ns: pct(0.99),
        p999_ns: pct(0.999),
        max_ns: lat.last().copied().unwrap_or(0),
        outcome_hash: hasher.finish(),
    }
}
