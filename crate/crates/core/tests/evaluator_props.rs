mod common;

use cdecf::dataset::Split;
use cdecf::evaluator::{evaluate, evaluate_at, heldout_ranks, rank_among};
use cdecf::model::FinalEmbeddings;
use cdecf::synthetic::random_dataset;
use common::oracle_metrics;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_embeddings(rows: usize, d: usize, integer: bool, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, d), || {
        if integer {
            rng.random_range(-2i32..=2) as f64
        } else {
            rng.random_range(-1.0..1.0)
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matches_dense_oracle(users in 7usize..=50, items in 6usize..=50, integer: bool, seed: u64) {
        let ds = random_dataset(users, items, 3, items.min(8), seed).unwrap();
        let emb = random_embeddings(users + items, 3, integer, seed ^ 1);
        let fe = FinalEmbeddings::new(emb.clone(), users).unwrap();
        for split in [Split::Validation, Split::Test] {
            for k in [1, 5, 20] {
                let rep = evaluate(&fe, &ds, k, split);
                prop_assert_eq!((rep.recall_at_k, rep.ndcg_at_k), oracle_metrics(&emb, &ds, k, split));
            }
        }
    }

    #[test]
    fn non_decreasing_in_k(users in 7usize..30, items in 6usize..40, seed: u64) {
        let ds = random_dataset(users, items, 3, 6, seed).unwrap();
        let fe = FinalEmbeddings::new(random_embeddings(users + items, 4, false, seed), users).unwrap();
        let ks: Vec<usize> = (1..=items).collect();
        let reps = evaluate_at(&fe, &ds, &ks, Split::Test);
        for w in reps.windows(2) {
            prop_assert!(w[0].recall_at_k <= w[1].recall_at_k);
            prop_assert!(w[0].ndcg_at_k <= w[1].ndcg_at_k);
        }
    }

    // Scaling user rows by a power of two is an exact, strictly increasing
    // map of that user's scores, so ties survive.
    #[test]
    fn invariant_under_row_scaling(users in 7usize..30, items in 6usize..40, seed: u64, power in -6i32..6) {
        let scale = 2f64.powi(power);
        let ds = random_dataset(users, items, 3, 6, seed).unwrap();
        let emb = random_embeddings(users + items, 3, true, seed);
        let mut scaled = emb.clone();
        scaled.rows_mut().into_iter().take(users).for_each(|mut r| r *= scale);
        let a = heldout_ranks(&FinalEmbeddings::new(emb, users).unwrap(), &ds, Split::Validation);
        let b = heldout_ranks(&FinalEmbeddings::new(scaled, users).unwrap(), &ds, Split::Validation);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn invariant_under_cubic_transform(scores in prop::collection::vec(-20i32..20, 2..60), excl in prop::collection::btree_set(0u32..60, 0..10), seed: usize) {
        let raw: Vec<f64> = scores.iter().map(|&s| s as f64).collect();
        let mapped: Vec<f64> = raw.iter().map(|x| x * x * x + 2.0 * x - 7.0).collect();
        let excluded: Vec<u32> = excl.into_iter().filter(|&i| (i as usize) < raw.len()).collect();
        let target = (seed % raw.len()) as u32;
        prop_assume!(excluded.binary_search(&target).is_err());
        prop_assert_eq!(rank_among(&raw, &excluded, None, target), rank_among(&mapped, &excluded, None, target));
    }
}

// Each user's held-out item lands in the top 20 of its candidates with
// probability 20 / |candidates| under random scores.
#[test]
fn random_baseline_within_three_standard_errors() {
    let (users, items) = (200, 60);
    let mut hits = Vec::new();
    let mut expected = 0.0;
    let mut variance = 0.0;
    for seed in 0..20u64 {
        let ds = random_dataset(users, items, 5, 10, seed).unwrap();
        let fe = FinalEmbeddings::new(random_embeddings(users + items, 16, false, 1000 + seed), users).unwrap();
        hits.push(evaluate(&fe, &ds, 20, Split::Validation).recall_at_k * users as f64);
        for u in 0..users {
            let candidates = (items - (ds.user_history(u).len() - 2)) as f64;
            let p = (20.0 / candidates).min(1.0);
            expected += p;
            variance += p * (1.0 - p);
        }
    }
    let observed: f64 = hits.iter().sum();
    assert!(
        (observed - expected).abs() < 3.0 * variance.sqrt(),
        "observed {observed} hits, expected {expected:.1} ± {:.1}",
        variance.sqrt()
    );
}
