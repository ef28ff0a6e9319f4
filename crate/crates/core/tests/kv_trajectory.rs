use polysim_core::scheduler::{predict_peak_kv, predicted_remaining, KvTrajectory};
use proptest::prelude::*;

/// Total KV `t` iterations ahead, straight from the definition.
fn total_at(items: &[(u64, u64)], t: u64) -> u64 {
    items.iter().filter(|&&(_, r)| r >= t).map(|&(f, _)| f + t).sum()
}

fn brute_max(items: &[(u64, u64)], upto: u64) -> u64 {
    (0..=upto).map(|t| total_at(items, t)).max().unwrap_or(0)
}

fn horizon(items: &[(u64, u64)]) -> u64 {
    items.iter().map(|x| x.1).max().unwrap_or(0)
}

fn items() -> impl Strategy<Value = Vec<(u64, u64)>> {
    prop::collection::vec((0u64..5000, 1u64..300), 0..24)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn at_matches_definition(v in items(), t in 0u64..400) {
        let tr = KvTrajectory::new(v.iter().copied());
        prop_assert_eq!(tr.at(t), total_at(&v, t));
    }

    #[test]
    fn peak_matches_scan(v in items()) {
        let tr = KvTrajectory::new(v.iter().copied());
        prop_assert_eq!(tr.peak(), brute_max(&v, horizon(&v)));
    }

    #[test]
    fn max_upto_matches_scan(v in items(), t in 0u64..400) {
        let tr = KvTrajectory::new(v.iter().copied());
        prop_assert_eq!(tr.max_upto(t), brute_max(&v, t));
    }

    #[test]
    fn peak_with_matches_rebuild(v in items(), f in 0u64..5000, r in 0u64..300) {
        let tr = KvTrajectory::new(v.iter().copied());
        let mut all = v.clone();
        all.push((f, r.max(1)));
        prop_assert_eq!(tr.peak_with(f, r), brute_max(&all, horizon(&all)));
    }

    #[test]
    fn predicted_peak_uses_average(
        res in prop::collection::vec((1u64..4000, 0u64..600), 0..16),
        cand in (1u64..4000, 0u64..600),
        avg in 1u64..512,
    ) {
        let mut all: Vec<(u64, u64)> = res.iter().map(|&(f, g)| (f, predicted_remaining(g, avg))).collect();
        all.push((cand.0, predicted_remaining(cand.1, avg)));
        prop_assert_eq!(predict_peak_kv(&res, cand, avg), brute_max(&all, horizon(&all)));
    }

    #[test]
    fn peak_is_at_least_current(v in items()) {
        let tr = KvTrajectory::new(v.iter().copied());
        prop_assert!(tr.peak() >= v.iter().map(|x| x.0).sum::<u64>());
    }
}

#[test]
fn empty_trajectory_is_zero() {
    let tr = KvTrajectory::new([]);
    assert_eq!(tr.peak(), 0);
    assert_eq!(tr.at(5), 0);
    assert_eq!(tr.peak_with(100, 3), 103);
}

proptest! {
    #[test]
    fn cursor_matches_max_upto(v in items(), steps in prop::collection::vec(0u64..40, 1..30)) {
        let tr = KvTrajectory::new(v.iter().copied());
        let mut cur = tr.cursor();
        let mut t = 0;
        for s in steps {
            t += s;
            prop_assert_eq!(cur.max_upto(t), brute_max(&v, t));
        }
    }
}
