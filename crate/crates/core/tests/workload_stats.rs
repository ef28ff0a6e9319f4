use polysim_core::perf_model::{AnalyticParams, PerfModel};
use polysim_core::workload::{assign_slos, burst_flip, generate_arrivals, TierDistribution};
use polysim_core::MS;

const N: usize = 100_000;

fn model() -> PerfModel {
    PerfModel::analytic(AnalyticParams::default()).unwrap()
}

fn tier_freqs(reqs: &[polysim_core::workload::Request], tiers: &[u64]) -> Vec<f64> {
    tiers
        .iter()
        .map(|&t| reqs.iter().filter(|r| r.tier.map(|x| x.tpot_us) == Some(t)).count() as f64 / reqs.len() as f64)
        .collect()
}

#[test]
fn assignment_frequencies_within_one_percent() {
    let dist = TierDistribution::standard();
    // Short requests so no draw cascades.
    let pairs = vec![(128u64, 128u64); N];
    let reqs = assign_slos(&pairs, &dist, &model(), 42);
    let got = tier_freqs(&reqs, &dist.tier_tpots());
    for (g, &(_, want)) in got.iter().zip(&dist.tpot_tiers) {
        assert!((g - want).abs() < 0.01, "{got:?}");
    }
    for &(ttft, want) in &dist.ttft_choices {
        let f = reqs.iter().filter(|r| r.ttft_us() == ttft).count() as f64 / N as f64;
        assert!((f - want).abs() < 0.01, "ttft {ttft}: {f}");
    }
}

#[test]
fn burst_halves_follow_their_distributions() {
    let dist = TierDistribution::standard();
    let inv = dist.inverted();
    let pairs = vec![(128u64, 128u64); N];
    let reqs = burst_flip(&pairs, N / 2, &dist, &inv, &model(), (1, 2)).unwrap();
    let tiers = dist.tier_tpots();
    let first = tier_freqs(&reqs[..N / 2], &tiers);
    let second = tier_freqs(&reqs[N / 2..], &tiers);
    for i in 0..tiers.len() {
        assert!((first[i] - dist.tpot_tiers[i].1).abs() < 0.01, "{first:?}");
        assert!((second[i] - inv.tpot_tiers[i].1).abs() < 0.01, "{second:?}");
    }
    assert!(reqs.iter().enumerate().all(|(i, r)| r.id == i as u64));
}

#[test]
fn arrival_rate_matches_target() {
    let dist = TierDistribution::standard();
    let pairs = vec![(128u64, 128u64); N];
    let reqs = generate_arrivals(assign_slos(&pairs, &dist, &model(), 3), 200.0, 9).unwrap();
    assert!(reqs.windows(2).all(|w| w[0].arrival_us <= w[1].arrival_us));
    assert!(reqs.iter().all(|r| r.arrival_us % MS == 0));
    let span = reqs.last().unwrap().arrival_us as f64 / 1e6;
    let rate = N as f64 / span;
    assert!((rate - 200.0).abs() / 200.0 < 0.01, "rate {rate}");
}

#[test]
fn infeasible_draws_cascade_to_looser_tiers() {
    let dist = TierDistribution::standard();
    // A 200k-token context decodes in 23 ms, so the 20 ms tier is
    // unreachable.
    let pairs = vec![(1_000u64, 199_000u64); 20_000];
    let reqs = assign_slos(&pairs, &dist, &model(), 5);
    assert!(reqs.iter().all(|r| r.tier.is_none_or(|t| t.tpot_us >= 30 * MS)));
    assert!(reqs.iter().all(|r| r.tier.is_some()));
}
