//! Embedding-propagation recommender driven by an ODE on the user/item
//! graph.
//!
//! Stacked user/item embeddings `E(t)` evolve under
//! `dE/dt = w(E) ⊙ (Ãⁿ − I)·E` from a trainable `E(0)`, where the per-node
//! weight `w` is either 1, a learned static value, or the sigmoid output of
//! an MLP evaluated on the current state. The final embeddings score
//! user/item pairs by inner product; training uses BPR with gradients taken
//! through the unrolled fixed-step solver.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod graph;
pub mod model;
pub mod ode;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
