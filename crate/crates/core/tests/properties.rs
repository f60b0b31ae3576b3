use dpn::data::{split_rows, Split, SplitRatios};
use dpn::embeddings::hash_id;
use dpn::metrics::{auc, auc_pairwise, logloss};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(prop::bool::ANY, n).prop_map(|v| {
                let mut y: Vec<f64> = v.into_iter().map(|b| b as u8 as f64).collect();
                // both classes present
                y[0] = 0.0;
                y[1] = 1.0;
                y
            }),
        )
    })
}

proptest! {
    #[test]
    fn auc_matches_pair_counting((s, y) in scored()) {
        let a = auc(&s, &y).unwrap();
        prop_assert!((a - auc_pairwise(&s, &y).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn auc_ignores_monotone_transforms((s, y) in scored(), k in 0.1f64..4.0, c in -3.0f64..3.0) {
        let t: Vec<f64> = s.iter().map(|v| (k * v + c).tanh() * 0.5 + (k * v).exp()).collect();
        prop_assert!((auc(&s, &y).unwrap() - auc(&t, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn auc_flips_under_negation((s, y) in scored()) {
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((auc(&s, &y).unwrap() + auc(&neg, &y).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn logloss_is_nonnegative_and_minimal_at_truth((s, y) in scored()) {
        let p: Vec<f64> = s.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let l = logloss(&p, &y).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert!(logloss(&y, &y).unwrap() <= l + 1e-12);
    }

    #[test]
    fn hash_stays_in_range(key in ".{0,24}", buckets in 1usize..5000) {
        prop_assert!(hash_id(&key, buckets) < buckets);
    }

    #[test]
    fn splits_follow_ratios(n in 1usize..3000, a in 1u32..10, b in 0u32..5, c in 0u32..5, seed in any::<u64>()) {
        let s = split_rows(n, SplitRatios([a, b, c]), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(s.len(), n);
        let total = (a + b + c) as f64;
        let train = s.iter().filter(|&&x| x == Split::Train).count() as f64;
        prop_assert!((train - n as f64 * a as f64 / total).abs() <= 2.0);
        let again = split_rows(n, SplitRatios([a, b, c]), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(s, again);
    }
}
