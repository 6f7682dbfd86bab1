mod common;

use cdecf::model::{Model, ModelConfig, Variant};
use cdecf::ode::{Method, SolverConfig};
use cdecf::synthetic::{planted_two_block, random_dataset};
use cdecf::trainer::{fit, sample_triples, TrainConfig};
use common::operator;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn triples_respect_train_membership() {
    let ds = random_dataset(30, 25, 3, 20, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut drawn = 0;
    while drawn < 100_000 {
        for t in sample_triples(&ds, 4096, &mut rng).unwrap() {
            let u = t.user as usize;
            let train = &ds.user_history(u)[..ds.user_history(u).len() - 2];
            assert!(train.contains(&t.positive));
            assert!(!train.contains(&t.negative));
            assert!((t.negative as usize) < ds.num_items());
            drawn += 1;
        }
    }
}

#[test]
fn planted_loss_halves_within_fifty_epochs() {
    let ds = planted_two_block(40, 40, 8, 3).unwrap();
    let op = operator(&ds, 2);
    let model = Model::new(ModelConfig::default(), 40, 40).unwrap();
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: 256,
        learning_rate: 0.01,
        early_stop_patience: 100,
        ..TrainConfig::default()
    };
    let out = fit(model, &ds, &op, &cfg).unwrap();
    let first = out.log.first().unwrap().loss;
    let last = out.log.last().unwrap().loss;
    assert_eq!(out.log.len(), 50);
    assert!(last < 0.5 * first, "loss {first} -> {last}");
}

#[test]
fn controlled_norm_stays_within_unweighted_envelope() {
    for seed in 0..10 {
        let ds = random_dataset(8, 10, 3, 6, seed).unwrap();
        for order in [1, 2, 3] {
            let op = operator(&ds, order);
            let solver = SolverConfig::new(Method::Rk4, 6.5, 40);
            let mk = |variant| {
                let cfg = ModelConfig {
                    variant,
                    embedding_dim: 6,
                    solver,
                    seed,
                    ..ModelConfig::default()
                };
                Model::new(cfg, 8, 10).unwrap()
            };
            let controlled = mk(Variant::Controlled);
            let plain = mk(Variant::NoWeight);
            assert_eq!(controlled.state.embeddings, plain.state.embeddings);
            let norm = |m: &Model| {
                let (_, trace) = m.forward(&op).unwrap();
                trace
                    .states()
                    .map(|(_, s)| s.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect::<Vec<_>>()
            };
            let envelope = norm(&plain).into_iter().fold(0.0, f64::max);
            for n in norm(&controlled) {
                assert!(
                    n <= envelope * (1.0 + 1e-12),
                    "seed {seed} order {order}: {n} > {envelope}"
                );
            }
        }
    }
}

#[test]
fn scores_are_bilinear() {
    let ds = random_dataset(6, 8, 3, 5, 1).unwrap();
    let op = operator(&ds, 2);
    let m = Model::new(
        ModelConfig {
            embedding_dim: 4,
            ..ModelConfig::default()
        },
        6,
        8,
    )
    .unwrap();
    let (fe, _) = m.forward(&op).unwrap();
    let items: Vec<u32> = (0..8).collect();
    for u in 0..6 {
        let scores = fe.predict_scores(u, &items).unwrap();
        for (i, s) in scores.iter().enumerate() {
            let mut naive = 0.0;
            for c in 0..4 {
                naive += fe.user(u)[c] * fe.item(i)[c];
            }
            assert!((s - naive).abs() < 1e-14);
        }
    }
    assert!(fe.predict_scores(6, &items).is_err());
    assert!(fe.predict_scores(0, &[8]).is_err());
}

#[test]
fn identical_seeds_give_identical_runs() {
    let ds = planted_two_block(20, 20, 6, 5).unwrap();
    let op = operator(&ds, 2);
    let cfg = TrainConfig {
        epochs: 6,
        batch_size: 32,
        eval_every: 2,
        ..TrainConfig::default()
    };
    let run = || {
        let m = Model::new(
            ModelConfig {
                embedding_dim: 8,
                ..ModelConfig::default()
            },
            20,
            20,
        )
        .unwrap();
        fit(m, &ds, &op, &cfg).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.best, b.best);
    let strip = |o: &cdecf::trainer::FitOutcome| {
        o.log
            .iter()
            .map(|r| (r.epoch, r.loss, r.recall20, r.ndcg20))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&a), strip(&b));
}
