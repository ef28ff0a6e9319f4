use polysim_core::sim::dslo_attained;
use polysim_core::Micros;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-token oracle: index every emission against its own deadline.
fn oracle(emissions: &[Micros], arrival: Micros, ttft: Micros, tpot: Micros) -> bool {
    if emissions.is_empty() {
        return false;
    }
    let mut ok = true;
    for i in 0..emissions.len() {
        let deadline = arrival + ttft + i as u64 * tpot;
        if emissions[i] > deadline {
            ok = false;
        }
    }
    ok
}

#[test]
fn ten_thousand_random_cases_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xD510);
    let mut attained = 0;
    for _ in 0..10_000 {
        let arrival = rng.random_range(0..1_000_000u64);
        let ttft = rng.random_range(1..2_000_000u64);
        let tpot = rng.random_range(1..200_000u64);
        let n = rng.random_range(0..40usize);
        // Emissions jittered around the deadlines so both outcomes occur.
        let mut t = arrival;
        let emissions: Vec<Micros> = (0..n)
            .map(|i| {
                let deadline = arrival + ttft + i as u64 * tpot;
                let jitter = rng.random_range(0..tpot / 4 + 2);
                let e = if rng.random_bool(0.98) { deadline - jitter.min(deadline - arrival) } else { deadline + 1 + jitter };
                t = e.max(t + 1);
                t
            })
            .collect();
        let got = dslo_attained(&emissions, arrival, ttft, tpot);
        assert_eq!(got, oracle(&emissions, arrival, ttft, tpot), "{emissions:?} {arrival} {ttft} {tpot}");
        attained += got as u32;
    }
    assert!(attained > 1000 && attained < 9000, "degenerate mix: {attained}");
}

#[test]
fn boundaries() {
    assert!(dslo_attained(&[300, 320, 340], 0, 300, 20));
    assert!(!dslo_attained(&[301, 310, 320], 0, 300, 20));
    assert!(!dslo_attained(&[], 0, 300, 20));
    // Gaps may exceed tpot as long as each deadline holds.
    assert!(dslo_attained(&[10, 320, 355], 0, 300, 30));
}
