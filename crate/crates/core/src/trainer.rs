//! Mini-batch BPR training with uniform negative sampling, Adam/SGD updates
//! and early stopping on validation Recall@20.

use std::io::Write;
use std::time::Instant;

use log::{debug, info};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{InteractionDataset, Split};
use crate::error::{Error, Result};
use crate::evaluator::evaluate;
use crate::graph::PropagationOperator;
use crate::model::{Gradients, Model, ModelState, TrainingTriple};

pub const EARLY_STOP_K: usize = 20;
pub const MAX_NEGATIVE_RETRIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub early_stop_patience: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            batch_size: 2048,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            early_stop_patience: 10,
            eval_every: 5,
            seed: 2024,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return err("batch_size must be at least 1");
        }
        if self.early_stop_patience == 0 {
            return err("early_stop_patience must be at least 1");
        }
        if self.eval_every == 0 {
            return err("eval_every must be at least 1");
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return err("learning_rate must be a non-negative number");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("adam betas must lie in [0, 1)");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return err("adam epsilon must be positive");
        }
        Ok(())
    }
}

/// Moment buffers mirror the parameter tensors in
/// [`ModelState::zip_with_grads`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimizerState {
            kind,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, state: &mut ModelState, grads: &Gradients, cfg: &TrainConfig) -> Result<()> {
        let pairs = state.zip_with_grads(grads)?;
        self.step += 1;
        let lr = cfg.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in pairs {
                    for (p, g) in p.iter_mut().zip(g) {
                        *p -= lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.first.is_empty() {
                    self.first = pairs.iter().map(|(p, _)| vec![0.0; p.len()]).collect();
                    self.second = self.first.clone();
                }
                if self.first.len() != pairs.len()
                    || self.first.iter().zip(&pairs).any(|(m, (p, _))| m.len() != p.len())
                {
                    return Err(Error::Dimension("optimizer state does not match parameters".into()));
                }
                let (b1, b2) = (cfg.beta1, cfg.beta2);
                let t = self.step as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                for (((p, g), m), v) in pairs.into_iter().zip(&mut self.first).zip(&mut self.second) {
                    for k in 0..p.len() {
                        m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                        v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                        let m_hat = m[k] / c1;
                        let v_hat = v[k] / c2;
                        p[k] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Uniform item not in `positives` (sorted), with at most
/// [`MAX_NEGATIVE_RETRIES`] rejection draws.
pub fn sample_negative<R: Rng + ?Sized>(positives: &[u32], num_items: u32, rng: &mut R) -> Option<u32> {
    (0..MAX_NEGATIVE_RETRIES)
        .map(|_| rng.random_range(0..num_items))
        .find(|j| positives.binary_search(j).is_err())
}

/// Draws `(u, i)` uniformly from the train pairs and a negative `j`
/// uniformly from items not in `u`'s train set.
pub fn sample_triples<R: Rng + ?Sized>(
    dataset: &InteractionDataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<TrainingTriple>> {
    let train = dataset.train();
    if train.is_empty() {
        return Err(Error::Config("train split is empty".into()));
    }
    let num_items = dataset.num_items() as u32;
    (0..batch_size)
        .map(|_| {
            let (u, i) = train[rng.random_range(0..train.len())];
            let j = sample_negative(dataset.train_items(u as usize), num_items, rng)
                .ok_or(Error::NegativeSampling { user: u as usize })?;
            Ok(TrainingTriple {
                user: u,
                positive: i,
                negative: j,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub mean_grad_norm: f64,
    pub seconds: f64,
    pub steps: usize,
}

/// One pass of `⌈|train| / batch_size⌉` optimizer steps.
pub fn train_epoch<R: Rng + ?Sized>(
    model: &mut Model,
    dataset: &InteractionDataset,
    op: &PropagationOperator,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    rng: &mut R,
    epoch: usize,
) -> Result<EpochStats> {
    let start = Instant::now();
    let steps = dataset.train().len().div_ceil(cfg.batch_size);
    let mut loss_sum = 0.0;
    let mut norm_sum = 0.0;
    for step in 0..steps {
        let batch = sample_triples(dataset, cfg.batch_size, rng)?;
        let (loss, grads) = model.loss_and_gradients(op, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteTraining {
                what: "loss",
                epoch,
                step,
            });
        }
        if !grads.is_finite() {
            return Err(Error::NonFiniteTraining {
                what: "gradient",
                epoch,
                step,
            });
        }
        loss_sum += loss;
        norm_sum += grads.norm();
        opt.apply(&mut model.state, &grads, cfg)?;
    }
    if !model.state.is_finite() {
        return Err(Error::NonFiniteTraining {
            what: "parameter",
            epoch,
            step: steps,
        });
    }
    Ok(EpochStats {
        mean_loss: loss_sum / steps as f64,
        mean_grad_norm: norm_sum / steps as f64,
        seconds: start.elapsed().as_secs_f64(),
        steps,
    })
}

/// Patience counter over evaluation rounds; higher metric is better.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Observation {
    Improved,
    NoImprovement,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn observe(&mut self, metric: f64) -> Observation {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.stale = 0;
            Observation::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                Observation::Stop
            } else {
                Observation::NoImprovement
            }
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub recall20: Option<f64>,
    pub ndcg20: Option<f64>,
    pub seconds: f64,
}

pub fn write_log<W: Write>(log: &[EpochLog], w: &mut W) -> Result<()> {
    for rec in log {
        serde_json::to_writer(&mut *w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub best: Model,
    pub best_epoch: usize,
    pub best_recall: f64,
    pub log: Vec<EpochLog>,
}

/// Trains until `epochs` or early stopping; validation Recall@20 is checked
/// every `eval_every` epochs and after the final epoch.
pub fn fit(
    mut model: Model,
    dataset: &InteractionDataset,
    op: &PropagationOperator,
    cfg: &TrainConfig,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(cfg.optimizer);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut log = Vec::new();
    let mut best = model.clone();
    let mut best_epoch = 0;

    for epoch in 1..=cfg.epochs {
        let stats = train_epoch(&mut model, dataset, op, cfg, &mut opt, &mut rng, epoch)?;
        let mut rec = EpochLog {
            epoch,
            loss: stats.mean_loss,
            recall20: None,
            ndcg20: None,
            seconds: stats.seconds,
        };
        let mut stop = false;
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let (emb, _) = model.forward(op)?;
            let report = evaluate(&emb, dataset, EARLY_STOP_K, Split::Validation);
            rec.recall20 = Some(report.recall_at_k);
            rec.ndcg20 = Some(report.ndcg_at_k);
            match stopper.observe(report.recall_at_k) {
                Observation::Improved => {
                    best = model.clone();
                    best_epoch = epoch;
                }
                Observation::NoImprovement => {}
                Observation::Stop => stop = true,
            }
            info!(
                "epoch {epoch}: loss {:.5} val recall@20 {:.5} ndcg@20 {:.5}",
                stats.mean_loss, report.recall_at_k, report.ndcg_at_k
            );
        } else {
            debug!("epoch {epoch}: loss {:.5} ({:.2}s)", stats.mean_loss, stats.seconds);
        }
        log.push(rec);
        if stop {
            info!("early stop after epoch {epoch}");
            break;
        }
    }
    Ok(FitOutcome {
        best,
        best_epoch,
        best_recall: stopper.best().unwrap_or(0.0),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NormalizedAdjacency;
    use crate::model::{ModelConfig, Variant};
    use crate::ode::{Method, SolverConfig};

    fn one_user_two_items() -> InteractionDataset {
        // history: train {0}, validation 2, test 3; item 1 never trained.
        InteractionDataset::from_histories(
            vec![vec![0, 2, 3], vec![1, 2, 3]],
            4,
            vec!["a".into(), "b".into()],
            (0..4).map(|i| i.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn negatives_avoid_train_items() {
        let ds = InteractionDataset::from_histories(
            vec![vec![0, 2, 1]],
            3,
            vec!["u".into()],
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        // train {0}; every other item is a valid negative
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_triples(&ds, 500, &mut rng).unwrap();
        assert!(batch.iter().all(|t| t.positive == 0 && t.negative != 0));
    }

    #[test]
    fn only_valid_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            assert_eq!(sample_negative(&[0], 2, &mut rng), Some(1));
        }
    }

    #[test]
    fn exhausted_retries_report_user() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(sample_negative(&[0, 1], 2, &mut rng), None);
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let ds = one_user_two_items();
        let a = sample_triples(&ds, 64, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_triples(&ds, 64, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn early_stopping_rule() {
        let mut s = EarlyStopping::new(1);
        assert_eq!(s.observe(0.5), Observation::Improved);
        assert_eq!(s.observe(0.4), Observation::Stop);
        let mut s = EarlyStopping::new(3);
        s.observe(0.1);
        assert_eq!(s.observe(0.1), Observation::NoImprovement);
        assert_eq!(s.observe(0.2), Observation::Improved);
        assert_eq!(s.observe(0.0), Observation::NoImprovement);
        assert_eq!(s.observe(0.0), Observation::NoImprovement);
        assert_eq!(s.observe(0.0), Observation::Stop);
    }

    fn small_model(variant: Variant) -> (Model, PropagationOperator, InteractionDataset) {
        let ds = one_user_two_items();
        let op = PropagationOperator::new(NormalizedAdjacency::from_dataset(&ds).unwrap(), 2).unwrap();
        let cfg = ModelConfig {
            variant,
            embedding_dim: 3,
            solver: SolverConfig::new(Method::Euler, 1.0, 2),
            ..ModelConfig::default()
        };
        (Model::new(cfg, 2, 4).unwrap(), op, ds)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            for v in Variant::ALL {
                let (mut m, _, _) = small_model(v);
                let before = m.state.clone();
                let zeros = Gradients::zeros_like(&m.state);
                let mut opt = OptimizerState::new(kind);
                opt.apply(&mut m.state, &zeros, &TrainConfig::default()).unwrap();
                assert_eq!(m.state, before);
                assert_eq!(opt.steps(), 1);
            }
        }
    }

    #[test]
    fn sgd_step_is_minus_lr_times_gradient() {
        let (mut m, op, ds) = small_model(Variant::Controlled);
        let batch = sample_triples(&ds, 1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let (_, g) = m.loss_and_gradients(&op, &batch).unwrap();
        let before = m.state.clone();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            optimizer: OptimizerKind::Sgd,
            ..TrainConfig::default()
        };
        OptimizerState::new(OptimizerKind::Sgd)
            .apply(&mut m.state, &g, &cfg)
            .unwrap();
        let delta = &m.state.embeddings - &before.embeddings;
        for (d, g) in delta.iter().zip(g.embeddings.iter()) {
            assert!((d + 0.05 * g).abs() < 1e-15);
        }
        let c0 = before.controller.unwrap();
        let c1 = m.state.controller.unwrap();
        let gc = g.controller.unwrap();
        assert!(((c1.b2 - c0.b2) + 0.05 * gc.b2).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_keeps_loss() {
        let (mut m, op, ds) = small_model(Variant::DiscreteWeight);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let before = m.state.clone();
        let mut opt = OptimizerState::new(OptimizerKind::Adam);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s1 = train_epoch(&mut m, &ds, &op, &cfg, &mut opt, &mut rng, 1).unwrap();
        assert_eq!(m.state, before);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s2 = train_epoch(&mut m, &ds, &op, &cfg, &mut opt, &mut rng, 2).unwrap();
        assert_eq!(s1.mean_loss, s2.mean_loss);
        assert_eq!(s1.steps, 1);
    }

    #[test]
    fn log_is_ndjson() {
        let log = vec![
            EpochLog {
                epoch: 1,
                loss: 0.5,
                recall20: None,
                ndcg20: None,
                seconds: 0.25,
            },
            EpochLog {
                epoch: 2,
                loss: 0.4,
                recall20: Some(0.75),
                ndcg20: Some(0.5),
                seconds: 0.25,
            },
        ];
        let mut buf = Vec::new();
        write_log(&log, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(
            lines[0],
            r#"{"epoch":1,"loss":0.5,"recall20":null,"ndcg20":null,"seconds":0.25}"#
        );
        let back: EpochLog = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(back, log[1]);
    }
}
