use std::collections::BTreeMap;

use polysim_core::capacity::Arch;
use polysim_core::scheduler::{Policy, SchedulerConfig};
use polysim_core::sim::{dslo_attained, run, write_tokens_csv, RunMetrics, SimConfig};
use polysim_core::workload::{assign_slos, generate_arrivals, synthesize_uniform, Request, TierDistribution};
use polysim_core::{AnalyticParams, PerfModel};
use proptest::prelude::*;

fn model() -> PerfModel {
    PerfModel::analytic(AnalyticParams::default()).unwrap()
}

fn workload(n: usize, max_in: u64, max_out: u64, rate: f64, seed: u64) -> Vec<Request> {
    let pairs = synthesize_uniform(n, max_in, max_out, seed);
    let reqs = assign_slos(&pairs, &TierDistribution::standard(), &model(), seed + 1);
    generate_arrivals(reqs, rate, seed + 2).unwrap()
}

fn config(policy: Policy, arch: Arch, instances: usize, reqs: &[Request], seed: u64) -> SimConfig {
    let max_d = reqs.iter().map(|r| r.d_true).max().unwrap();
    let avg_d = (reqs.iter().map(|r| r.d_true).sum::<u64>() / reqs.len() as u64).max(1);
    SimConfig {
        instances,
        record_tokens: true,
        check_invariants: true,
        sched: SchedulerConfig {
            policy,
            arch,
            token_budget: 2048,
            avg_decode: avg_d,
            max_decode: max_d,
            seed,
            ..SchedulerConfig::default()
        },
        ..SimConfig::default()
    }
}

const COMBOS: [(Policy, Arch); 7] = [
    (Policy::Polyserve, Arch::Pd),
    (Policy::Random, Arch::Pd),
    (Policy::Minimal, Arch::Pd),
    (Policy::Polyserve, Arch::Co),
    (Policy::Random, Arch::Co),
    (Policy::Minimal, Arch::Co),
    (Policy::ChunkStatic, Arch::Co),
];

/// Token-level checks that hold for any run.
fn check_run(reqs: &[Request], m: &RunMetrics) {
    let tokens = m.tokens.as_ref().unwrap();
    let mut by_req: BTreeMap<u64, Vec<(u64, u64)>> = BTreeMap::new();
    for t in tokens {
        by_req.entry(t.request_id).or_default().push((t.i, t.emit_us));
    }
    assert_eq!(by_req.len(), reqs.len(), "every request emits");
    assert_eq!(m.submitted, reqs.len() as u64);
    assert_eq!(m.requests.len(), reqs.len());
    for (r, out) in reqs.iter().zip(&m.requests) {
        assert_eq!(r.id, out.id);
        let mut v = by_req.remove(&r.id).unwrap();
        v.sort();
        assert_eq!(v.len() as u64, r.d_true + 1, "request {}", r.id);
        assert!(v.iter().enumerate().all(|(i, &(k, _))| k == i as u64));
        assert!(v.windows(2).all(|w| w[0].1 < w[1].1), "emissions strictly increase");
        assert!(v[0].1 > r.arrival_us);
        assert_eq!(out.first_token_us, Some(v[0].1));
        assert_eq!(out.finish_us, v.last().unwrap().1);
        let emis: Vec<u64> = v.iter().map(|x| x.1).collect();
        let ok = r.tier.is_some() && dslo_attained(&emis, r.arrival_us, r.ttft_us(), r.tpot_us());
        assert_eq!(out.attained, ok, "request {}", r.id);
    }
    let measured: Vec<_> = m.requests.iter().filter(|o| o.measured && o.tpot_us.is_some()).collect();
    assert_eq!(m.measured, measured.len() as u64);
    assert_eq!(m.attained, measured.iter().filter(|o| o.attained).count() as u64);
    assert_eq!(m.attained + m.violated, m.measured);
    assert_eq!(m.per_tier.iter().map(|t| t.measured).sum::<u64>(), m.measured);
    assert_eq!(m.replay_scaling(), m.final_assignment);
    let busy: u128 = m.servers.iter().map(|s| s.busy_us as u128).sum();
    assert!(busy <= m.instance_us);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn random_workloads_conserve_tokens(
        n in 30usize..150,
        max_in in 16u64..3000,
        max_out in 2u64..600,
        rate in 1.0f64..60.0,
        instances in 2usize..7,
        seed in any::<u64>(),
    ) {
        let reqs = workload(n, max_in, max_out, rate, seed % 1_000_000);
        for (policy, arch) in COMBOS {
            let m = run(&config(policy, arch, instances, &reqs, seed), &model(), &reqs)
                .unwrap_or_else(|e| panic!("{policy:?} {arch:?}: {e}"));
            check_run(&reqs, &m);
        }
    }
}

#[test]
fn identical_seeds_give_identical_tokens() {
    let reqs = workload(400, 1024, 512, 30.0, 5);
    for (policy, arch) in COMBOS {
        let cfg = config(policy, arch, 4, &reqs, 9);
        let dump = |m: RunMetrics| {
            let mut buf = Vec::new();
            write_tokens_csv(m.tokens.as_ref().unwrap(), &mut buf).unwrap();
            buf
        };
        let a = dump(run(&cfg, &model(), &reqs).unwrap());
        let b = dump(run(&cfg, &model(), &reqs).unwrap());
        assert!(a == b, "{policy:?} {arch:?}");
    }
}

#[test]
fn light_load_is_fully_attained() {
    let reqs = workload(300, 512, 256, 2.0, 77);
    for (policy, arch) in COMBOS {
        let m = run(&config(policy, arch, 8, &reqs, 1), &model(), &reqs).unwrap();
        assert!(m.attainment >= 0.99, "{policy:?} {arch:?}: {}", m.attainment);
    }
}

#[test]
fn polyserve_releases_idle_servers() {
    let reqs = workload(200, 512, 128, 5.0, 3);
    for arch in [Arch::Pd, Arch::Co] {
        let m = run(&config(Policy::Polyserve, arch, 10, &reqs, 1), &model(), &reqs).unwrap();
        assert!(!m.scaling_events.is_empty());
        // Billed time stays well below keeping every server on.
        assert!(m.instance_us < 10 * m.makespan_us as u128, "{arch:?}");
    }
}
