//! Experiment configuration file (JSON).
//!
//! Every key is optional; missing keys take the defaults below. A single
//! `seed` drives model initialisation and batch sampling.
//!
//! ```json
//! {
//!   "dataset": "office.ds",
//!   "dataset_name": "Office",
//!   "out_dir": "runs/office",
//!   "seed": 2024,
//!   "eval_k": [10, 20],
//!   "threads": null,
//!   "model":  { "variant": "controlled", "embedding_dim": 64, "propagation_order": 2,
//!               "l2_lambda": 0.0001, "init_std": 0.1 },
//!   "solver": { "method": "euler", "t0": 0.0, "t1": 6.5, "steps": 7 },
//!   "train":  { "epochs": 1000, "batch_size": 2048, "learning_rate": 0.001,
//!               "optimizer": "adam", "beta1": 0.9, "beta2": 0.999, "epsilon": 1e-8,
//!               "early_stop_patience": 10, "eval_every": 5 }
//! }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::ode::SolverConfig;
use crate::trainer::{OptimizerKind, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Variant,
    pub embedding_dim: usize,
    pub propagation_order: usize,
    pub l2_lambda: f64,
    pub init_std: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            variant: m.variant,
            embedding_dim: m.embedding_dim,
            propagation_order: m.propagation_order,
            l2_lambda: m.l2_lambda,
            init_std: m.init_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub early_stop_patience: usize,
    pub eval_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            optimizer: t.optimizer,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            early_stop_patience: t.early_stop_patience,
            eval_every: t.eval_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub dataset_name: String,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub eval_k: Vec<usize>,
    pub threads: Option<usize>,
    pub model: ModelSection,
    pub solver: SolverConfig,
    pub train: TrainSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: PathBuf::from("dataset.bin"),
            dataset_name: "dataset".into(),
            out_dir: PathBuf::from("out"),
            seed: 2024,
            eval_k: vec![10, 20],
            threads: None,
            model: ModelSection::default(),
            solver: SolverConfig::default(),
            train: TrainSection::default(),
        }
    }
}

/// Offset between the model-init and sampler streams so they never share a
/// ChaCha seed.
const SAMPLER_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

impl ExperimentConfig {
    /// Parses and validates; on failure the error lists every bad key.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        let defaults = serde_json::to_value(ExperimentConfig::default())?;
        let mut problems = Vec::new();
        match &value {
            Value::Object(map) => check_object(map, &defaults, &defaults, "", &mut problems),
            _ => problems.push("config must be a JSON object".into()),
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Checks every semantic constraint and reports all failures together.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.eval_k.is_empty() || self.eval_k.contains(&0) {
            problems.push("eval_k: needs at least one cutoff, all ≥ 1".to_string());
        }
        if self.threads == Some(0) {
            problems.push("threads: must be at least 1".to_string());
        }
        for (key, r) in [
            ("model", self.model_config().validate()),
            ("train", self.train_config().validate()),
        ] {
            if let Err(Error::Config(m)) = r {
                problems.push(format!("{key}: {m}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: self.model.variant,
            embedding_dim: self.model.embedding_dim,
            propagation_order: self.model.propagation_order,
            solver: self.solver,
            l2_lambda: self.model.l2_lambda,
            init_std: self.model.init_std,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            optimizer: t.optimizer,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            early_stop_patience: t.early_stop_patience,
            eval_every: t.eval_every,
            seed: self.seed.wrapping_add(SAMPLER_SEED_OFFSET),
        }
    }
}

// Leaves are checked one at a time by patching them into the full default
// document, so one bad value does not hide another.
fn check_object(map: &Map<String, Value>, schema: &Value, root: &Value, prefix: &str, problems: &mut Vec<String>) {
    for (key, v) in map {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match schema.get(key) {
            None => problems.push(format!("{path}: unknown key")),
            Some(Value::Object(sub)) if !sub.is_empty() => match v {
                Value::Object(inner) => check_object(inner, &schema[key], root, &path, problems),
                _ => problems.push(format!("{path}: expected an object")),
            },
            Some(_) => {
                let mut probe = root.clone();
                let mut slot = &mut probe;
                for part in path.split('.') {
                    slot = &mut slot[part];
                }
                *slot = v.clone();
                if let Err(e) = serde_json::from_value::<ExperimentConfig>(probe) {
                    problems.push(format!("{path}: {e}"));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::Method;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(
            ExperimentConfig::from_json_str("{}").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn canonical_json_round_trips() {
        let mut c = ExperimentConfig::default();
        c.solver.method = Method::Rk4;
        c.model.variant = Variant::NoWeight;
        c.threads = Some(3);
        assert_eq!(ExperimentConfig::from_json_str(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn every_bad_key_is_reported() {
        let text = r#"{"sed": 1, "model": {"variant": "huge", "dim": 3},
                       "solver": {"steps": -2}, "train": "fast"}"#;
        let Err(Error::Config(msg)) = ExperimentConfig::from_json_str(text) else {
            panic!("expected a config error");
        };
        for key in ["sed", "model.variant", "model.dim", "solver.steps", "train"] {
            assert!(msg.contains(&format!("{key}:")), "{key} missing from: {msg}");
        }
    }

    #[test]
    fn semantic_errors_are_collected() {
        let text = r#"{"eval_k": [], "solver": {"steps": 0}, "train": {"batch_size": 0}}"#;
        let Err(Error::Config(msg)) = ExperimentConfig::from_json_str(text) else {
            panic!("expected a config error");
        };
        assert!(msg.contains("eval_k"));
        assert!(msg.contains("model:"));
        assert!(msg.contains("train:"));
    }

    #[test]
    fn seed_reaches_model_and_sampler() {
        let c = ExperimentConfig::from_json_str(r#"{"seed": 7}"#).unwrap();
        assert_eq!(c.model_config().seed, 7);
        assert_ne!(c.train_config().seed, TrainConfig::default().seed);
        let d = ExperimentConfig::from_json_str(r#"{"seed": 8}"#).unwrap();
        assert_ne!(c.train_config().seed, d.train_config().seed);
    }
}
