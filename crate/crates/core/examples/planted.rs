//! Trains each variant on the planted two-block dataset and prints the
//! best validation Recall@20.
//!
//! cargo run --release -p cdecf-core --example planted -- [lr] [batch] [epochs]

use cdecf::graph::{NormalizedAdjacency, PropagationOperator};
use cdecf::model::{Model, ModelConfig, Variant};
use cdecf::synthetic::planted_two_block;
use cdecf::trainer::{fit, TrainConfig};

fn main() -> cdecf::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let lr: f64 = args.first().map_or(0.01, |s| s.parse().expect("lr"));
    let batch: usize = args.get(1).map_or(256, |s| s.parse().expect("batch"));
    let epochs: usize = args.get(2).map_or(100, |s| s.parse().expect("epochs"));
    for seed in 0..3u64 {
        let ds = planted_two_block(40, 40, 8, seed)?;
        let op = PropagationOperator::new(NormalizedAdjacency::from_dataset(&ds)?, 2)?;
        for variant in Variant::ALL {
            let mcfg = ModelConfig {
                variant,
                seed,
                ..ModelConfig::default()
            };
            let tcfg = TrainConfig {
                epochs,
                batch_size: batch,
                learning_rate: lr,
                eval_every: 5,
                early_stop_patience: 1000,
                seed: seed + 100,
                ..TrainConfig::default()
            };
            let out = fit(Model::new(mcfg, ds.num_users(), ds.num_items())?, &ds, &op, &tcfg)?;
            println!(
                "seed {seed} {variant}: best val recall@20 {:.3} at epoch {} (final loss {:.4})",
                out.best_recall,
                out.best_epoch,
                out.log.last().map_or(f64::NAN, |r| r.loss)
            );
        }
    }
    Ok(())
}
