use polysim_core::scheduler::{dynamic_chunk_plan, form_prefill_batch, static_chunk_plan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn dynamic_plan_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC4A7);
    for _ in 0..1000 {
        let p = rng.random_range(1..50_000u64);
        let budget = rng.random_range(1..5_000u64);
        let plan = dynamic_chunk_plan(p, budget);
        let stat = static_chunk_plan(p, budget);
        assert_eq!(plan.iter().sum::<u64>(), p);
        assert!(*plan.last().unwrap() < 2 * budget, "p={p} budget={budget}");
        assert!(plan[..plan.len() - 1].iter().all(|&c| c == budget));
        assert!(plan.len() <= stat.len());
        assert_eq!(stat.len() as u64, p.div_ceil(budget));
        // One iteration saved exactly when the tail merges a partial chunk.
        let merged = p >= budget && p % budget != 0;
        assert_eq!(plan.len() + merged as usize, stat.len(), "p={p} budget={budget}");
    }
}

#[test]
fn worked_example() {
    assert_eq!(dynamic_chunk_plan(2050, 1024), vec![1024, 1026]);
    assert_eq!(dynamic_chunk_plan(2050, 1024).len(), 2);
    assert_eq!(static_chunk_plan(2050, 1024).len(), 3);
}

#[test]
fn static_batch_arithmetic() {
    assert_eq!(form_prefill_batch(&[600], 512, false), vec![(0, 512)]);
    assert_eq!(form_prefill_batch(&[88], 512, false), vec![(0, 88)]);
}

#[test]
fn batches_never_exceed_remaining() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let lefts: Vec<u64> = (0..rng.random_range(1..8)).map(|_| rng.random_range(0..6000)).collect();
        let budget = rng.random_range(1..4096u64);
        for dynamic in [false, true] {
            let b = form_prefill_batch(&lefts, budget, dynamic);
            let total: u64 = b.iter().map(|x| x.1).sum();
            assert!(b.iter().all(|&(i, c)| c >= 1 && c <= lefts[i]));
            if !dynamic {
                assert!(total <= budget);
            } else {
                assert!(total < 2 * budget);
            }
            if lefts.iter().any(|&l| l > 0) {
                assert!(!b.is_empty());
            }
        }
    }
}
