use polysim_core::capacity::{
    cost_co, cost_pd, max_decode_batch_pd, max_token_batch_co, prefill_batch_limit, Binding, WorkloadPoint,
    DEFAULT_PREFILL_CAP,
};
use polysim_core::perf_model::{AnalyticParams, PerfModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Iteration time written out from the model coefficients.
fn iter_us(a: &AnalyticParams, b: u64, kv: u64, chunk: u64) -> u64 {
    let t = a.g0_us + a.g1_us * b.saturating_sub(a.b_knee) as f64 + a.d1_us * kv as f64 + a.pf1_us * chunk as f64;
    (t.round() as u64).max(1)
}

fn pd_scan(a: &AnalyticParams, w: &WorkloadPoint) -> u64 {
    (1..=a.kv_capacity)
        .filter(|&b| {
            let kv = (b * (2 * w.p + w.d)).div_ceil(2);
            kv <= a.kv_capacity && iter_us(a, b, kv, 0) <= w.tpot_us
        })
        .max()
        .unwrap_or(0)
}

fn co_scan(a: &AnalyticParams, w: &WorkloadPoint) -> u64 {
    (1..=2 * a.kv_capacity)
        .filter(|&b| {
            let kv = (w.d * (2 * w.p + w.d) * b).div_ceil(2 * (w.p + w.d)) + w.p;
            let t = iter_us(a, b, kv, 0);
            kv <= a.kv_capacity && t <= w.tpot_us && (w.p + w.d) * t <= w.ttft_us * b
        })
        .max()
        .unwrap_or(0)
}

fn random_params(rng: &mut ChaCha8Rng) -> AnalyticParams {
    AnalyticParams {
        g0_us: rng.random_range(200.0..5000.0),
        g1_us: rng.random_range(0.0..40.0),
        b_knee: rng.random_range(1..128),
        d1_us: rng.random_range(0.01..3.0),
        pf1_us: rng.random_range(0.0..2.0),
        kv_capacity: rng.random_range(100..=5000),
    }
}

fn random_point(rng: &mut ChaCha8Rng) -> WorkloadPoint {
    WorkloadPoint::new(
        rng.random_range(1..400),
        rng.random_range(1..400),
        rng.random_range(1_000..2_000_000),
        rng.random_range(300..40_000),
    )
    .unwrap()
}

#[test]
fn batch_limits_match_linear_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xCA9A);
    let (mut pd_pos, mut co_pos) = (0, 0);
    for _ in 0..500 {
        let a = random_params(&mut rng);
        let model = PerfModel::analytic(a).unwrap();
        let w = random_point(&mut rng);
        let pd = max_decode_batch_pd(&model, &w);
        let co = max_token_batch_co(&model, &w);
        assert_eq!(pd.batch, pd_scan(&a, &w), "pd {a:?} {w:?}");
        assert_eq!(co.batch, co_scan(&a, &w), "co {a:?} {w:?}");
        assert_eq!(pd.batch == 0, pd.binding == Binding::NoneFeasible);
        assert_eq!(co.batch == 0, co.binding == Binding::NoneFeasible);
        pd_pos += (pd.batch > 0) as u32;
        co_pos += (co.batch > 0) as u32;
    }
    assert!(pd_pos > 100 && co_pos > 100, "too few feasible cases: {pd_pos} {co_pos}");
}

#[test]
fn prefill_limit_matches_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..500 {
        let a = random_params(&mut rng);
        let model = PerfModel::analytic(a).unwrap();
        let w = random_point(&mut rng);
        let cap = rng.random_range(1..3000);
        let want = (1..=cap.min(a.kv_capacity)).filter(|&b| iter_us(&a, b, b, b) <= w.ttft_us).max().unwrap_or(0);
        assert_eq!(prefill_batch_limit(&model, &w, cap), want);
    }
}

#[test]
fn limits_are_monotone_in_slo_and_memory() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3070);
    for _ in 0..1000 {
        let a = random_params(&mut rng);
        let w = random_point(&mut rng);
        let model = PerfModel::analytic(a).unwrap();
        let looser_tpot = WorkloadPoint::new(w.p, w.d, w.ttft_us, w.tpot_us + rng.random_range(1..20_000)).unwrap();
        let looser_ttft = WorkloadPoint::new(w.p, w.d, w.ttft_us + rng.random_range(1..1_000_000), w.tpot_us).unwrap();
        let bigger = PerfModel::analytic(AnalyticParams {
            kv_capacity: a.kv_capacity + rng.random_range(1..5000),
            ..a
        })
        .unwrap();

        let pd = max_decode_batch_pd(&model, &w).batch;
        let co = max_token_batch_co(&model, &w).batch;
        assert!(max_decode_batch_pd(&model, &looser_tpot).batch >= pd);
        assert!(max_decode_batch_pd(&bigger, &w).batch >= pd);
        assert_eq!(max_decode_batch_pd(&model, &looser_ttft).batch, pd);
        assert!(max_token_batch_co(&model, &looser_tpot).batch >= co);
        assert!(max_token_batch_co(&model, &looser_ttft).batch >= co);
        assert!(max_token_batch_co(&bigger, &w).batch >= co);
    }
}

#[test]
fn costs_follow_closed_form() {
    let a = AnalyticParams::default();
    let model = PerfModel::analytic(a).unwrap();
    let w = WorkloadPoint::new(1000, 4000, 1_000_000, 40_000).unwrap();
    let b = max_decode_batch_pd(&model, &w).batch as f64;
    let pf = prefill_batch_limit(&model, &w, DEFAULT_PREFILL_CAP) as f64;
    let gemm = |x: f64| a.g0_us + a.g1_us * (x - a.b_knee as f64).max(0.0);
    let attn = a.d1_us * 4000.0 * (1000.0 + 2000.0);
    let want = 1000.0 * gemm(pf) / pf + a.pf1_us * 1000.0 + 4000.0 * gemm(b) / b + attn;
    assert!((cost_pd(&model, &w, DEFAULT_PREFILL_CAP).unwrap() - want).abs() < 1e-6);
    let bc = max_token_batch_co(&model, &w).batch as f64;
    let want_co = 5000.0 * gemm(bc) / bc + a.pf1_us * 1000.0 + attn;
    assert!((cost_co(&model, &w).unwrap() - want_co).abs() < 1e-6);
}
