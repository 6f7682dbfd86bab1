//! Oracles shared by the integration tests. Nothing here calls the code
//! under test for the quantity it checks.
#![allow(dead_code)]

use cdecf::dataset::{InteractionDataset, Split};
use cdecf::graph::{NormalizedAdjacency, PropagationOperator};
use cdecf::model::{Model, ModelConfig, TrainingTriple, Variant};
use cdecf::ode::{Method, SolverConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn operator(ds: &InteractionDataset, order: usize) -> PropagationOperator {
    PropagationOperator::new(NormalizedAdjacency::from_dataset(ds).unwrap(), order).unwrap()
}

pub fn small_model(ds: &InteractionDataset, variant: Variant, d: usize, steps: usize, seed: u64) -> Model {
    let cfg = ModelConfig {
        variant,
        embedding_dim: d,
        solver: SolverConfig::new(Method::Euler, 6.5, steps),
        seed,
        ..ModelConfig::default()
    };
    let mut m = Model::new(cfg, ds.num_users(), ds.num_items()).unwrap();
    // Spread the scale so the controller is not saturated and the loss is
    // far from its ln 2 plateau.
    m.state.embeddings.mapv_inplace(|v| v * 5.0);
    if let Some(w) = m.state.node_weights.as_mut() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        w.mapv_inplace(|_| rng.random_range(0.3..1.0));
    }
    m
}

/// Every valid (u, i, j) triple once; j ranges over non-train items.
pub fn all_triples(ds: &InteractionDataset) -> Vec<TrainingTriple> {
    let mut out = Vec::new();
    for &(u, i) in ds.train() {
        for j in 0..ds.num_items() as u32 {
            if !ds.is_train_pair(u as usize, j) {
                out.push(TrainingTriple {
                    user: u,
                    positive: i,
                    negative: j,
                });
            }
        }
    }
    out
}

/// Worst per-coordinate relative error between the analytic gradient and
/// central differences with step 1e-5. The denominator is floored at 1e-6
/// so coordinates with vanishing gradient are judged in absolute terms.
pub fn max_fd_relative_error(model: &Model, op: &PropagationOperator, triples: &[TrainingTriple]) -> (f64, usize) {
    let (_, grads) = model.loss_and_gradients(op, triples).unwrap();
    let loss_at = |m: &Model| m.loss_and_gradients(op, triples).unwrap().0;
    let mut probe = model.clone();
    let blocks: Vec<(usize, Vec<f64>)> = probe
        .state
        .zip_with_grads(&grads)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(b, (_, g))| (b, g.to_vec()))
        .collect();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (b, analytic) in blocks {
        for (j, &a) in analytic.iter().enumerate() {
            let mut plus = model.clone();
            plus.state.zip_with_grads(&grads).unwrap()[b].0[j] += h;
            let mut minus = model.clone();
            minus.state.zip_with_grads(&grads).unwrap()[b].0[j] -= h;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (worst, checked)
}

/// Naive dense ranking: score every item by an explicit loop, sort the
/// candidates by (score desc, index asc), locate the target.
pub fn oracle_rank(emb: &Array2<f64>, ds: &InteractionDataset, user: usize, split: Split) -> usize {
    let nu = ds.num_users();
    let d = emb.ncols();
    let target = ds.heldout(split)[user];
    let mut cand: Vec<(f64, u32)> = Vec::new();
    for i in 0..ds.num_items() as u32 {
        if ds.user_history(user)[..ds.user_history(user).len() - 2].contains(&i) {
            continue;
        }
        if split == Split::Test && i == ds.validation()[user] {
            continue;
        }
        let mut s = 0.0;
        for c in 0..d {
            s += emb[[user, c]] * emb[[nu + i as usize, c]];
        }
        cand.push((s, i));
    }
    cand.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    cand.iter().position(|&(_, i)| i == target).unwrap() + 1
}

pub fn oracle_metrics(emb: &Array2<f64>, ds: &InteractionDataset, k: usize, split: Split) -> (f64, f64) {
    let mut hits = 0usize;
    let mut ndcg = 0.0;
    for u in 0..ds.num_users() {
        let r = oracle_rank(emb, ds, u, split);
        if r <= k {
            hits += 1;
            ndcg += 1.0 / ((r + 1) as f64).log2();
        } else {
            ndcg += 0.0;
        }
    }
    let n = ds.num_users() as f64;
    (hits as f64 / n, ndcg / n)
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
