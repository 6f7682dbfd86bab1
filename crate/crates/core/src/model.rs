//! The three weighting variants over one forward/backward pipeline, the BPR
//! objective and inner-product scoring.

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::PropagationOperator;
use crate::ode::{
    backward, sigmoid, solve, ControllerGrad, DynamicsGrad, GraphDynamics, SolveTrace, SolverConfig, WeightController,
    WeightSource,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Unit weight on every node.
    NoWeight,
    /// Learned static weight per node.
    DiscreteWeight,
    /// Weight produced from the current state by the controller MLP.
    Controlled,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::NoWeight, Variant::DiscreteWeight, Variant::Controlled];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NoWeight => "no_weight",
            Variant::DiscreteWeight => "discrete_weight",
            Variant::Controlled => "controlled",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant '{s}' (expected no_weight, discrete_weight or controlled)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub embedding_dim: usize,
    pub propagation_order: usize,
    pub solver: SolverConfig,
    pub l2_lambda: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Controlled,
            embedding_dim: 64,
            propagation_order: 2,
            solver: SolverConfig::default(),
            l2_lambda: 1e-4,
            init_std: 0.1,
            seed: 2024,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be at least 1".into()));
        }
        if self.propagation_order == 0 {
            return Err(Error::Config("propagation_order must be at least 1".into()));
        }
        if self.l2_lambda.is_nan() || self.l2_lambda < 0.0 {
            return Err(Error::Config("l2_lambda must be non-negative".into()));
        }
        if self.init_std.is_nan() || self.init_std <= 0.0 {
            return Err(Error::Config("init_std must be positive".into()));
        }
        self.solver.validate()
    }

    /// Hidden width of the controller MLP.
    pub fn hidden_dim(&self) -> usize {
        (self.embedding_dim / 2).max(1)
    }
}

/// Trainable parameters. Exactly the ones the variant needs are present.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    /// `E(0)`, users stacked above items.
    pub embeddings: Array2<f64>,
    pub controller: Option<WeightController>,
    pub node_weights: Option<Array1<f64>>,
}

/// Gradient with the layout of [`ModelState`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embeddings: Array2<f64>,
    pub controller: Option<ControllerGrad>,
    pub node_weights: Option<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(state: &ModelState) -> Self {
        Gradients {
            embeddings: Array2::zeros(state.embeddings.raw_dim()),
            controller: state.controller.as_ref().map(ControllerGrad::zeros_like),
            node_weights: state.node_weights.as_ref().map(|w| Array1::zeros(w.len())),
        }
    }

    pub fn norm(&self) -> f64 {
        self.flat_slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.flat_slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    fn flat_slices(&self) -> Vec<&[f64]> {
        let mut out = vec![self.embeddings.as_slice().expect("standard layout")];
        if let Some(c) = &self.controller {
            out.push(c.w1.as_slice().expect("standard layout"));
            out.push(c.b1.as_slice().expect("standard layout"));
            out.push(c.w2.as_slice().expect("standard layout"));
            out.push(std::slice::from_ref(&c.b2));
        }
        if let Some(w) = &self.node_weights {
            out.push(w.as_slice().expect("standard layout"));
        }
        out
    }
}

impl ModelState {
    /// Parameter tensors in a fixed order, paired with their gradients.
    pub fn zip_with_grads<'a>(&'a mut self, grads: &'a Gradients) -> Result<Vec<(&'a mut [f64], &'a [f64])>> {
        let mismatch = || Error::Dimension("gradient layout does not match parameters".into());
        let mut out = Vec::new();
        if self.embeddings.raw_dim() != grads.embeddings.raw_dim() {
            return Err(mismatch());
        }
        out.push((
            self.embeddings.as_slice_mut().ok_or_else(mismatch)?,
            grads.embeddings.as_slice().ok_or_else(mismatch)?,
        ));
        match (&mut self.controller, &grads.controller) {
            (Some(c), Some(g)) => {
                if c.w1.raw_dim() != g.w1.raw_dim() || c.w2.len() != g.w2.len() {
                    return Err(mismatch());
                }
                out.push((
                    c.w1.as_slice_mut().ok_or_else(mismatch)?,
                    g.w1.as_slice().ok_or_else(mismatch)?,
                ));
                out.push((
                    c.b1.as_slice_mut().ok_or_else(mismatch)?,
                    g.b1.as_slice().ok_or_else(mismatch)?,
                ));
                out.push((
                    c.w2.as_slice_mut().ok_or_else(mismatch)?,
                    g.w2.as_slice().ok_or_else(mismatch)?,
                ));
                out.push((std::slice::from_mut(&mut c.b2), std::slice::from_ref(&g.b2)));
            }
            (None, None) => {}
            _ => return Err(mismatch()),
        }
        match (&mut self.node_weights, &grads.node_weights) {
            (Some(w), Some(g)) if w.len() == g.len() => {
                out.push((
                    w.as_slice_mut().ok_or_else(mismatch)?,
                    g.as_slice().ok_or_else(mismatch)?,
                ));
            }
            (None, None) => {}
            _ => return Err(mismatch()),
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.embeddings.iter().all(|v| v.is_finite())
            && self.controller.as_ref().is_none_or(|c| {
                c.w1.iter().chain(c.b1.iter()).chain(c.w2.iter()).all(|v| v.is_finite()) && c.b2.is_finite()
            })
            && self
                .node_weights
                .as_ref()
                .is_none_or(|w| w.iter().all(|v| v.is_finite()))
    }
}

/// `E_*`: final embeddings with the user/item split.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalEmbeddings {
    matrix: Array2<f64>,
    num_users: usize,
}

impl FinalEmbeddings {
    pub fn new(matrix: Array2<f64>, num_users: usize) -> Result<Self> {
        if num_users > matrix.nrows() {
            return Err(Error::Dimension(format!(
                "{num_users} users but only {} embedding rows",
                matrix.nrows()
            )));
        }
        Ok(FinalEmbeddings { matrix, num_users })
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> Array2<f64> {
        self.matrix
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.matrix.nrows() - self.num_users
    }

    pub fn user(&self, u: usize) -> ArrayView1<'_, f64> {
        self.matrix.row(u)
    }

    pub fn item(&self, i: usize) -> ArrayView1<'_, f64> {
        self.matrix.row(self.num_users + i)
    }

    pub fn items(&self) -> ndarray::ArrayView2<'_, f64> {
        self.matrix.slice(s![self.num_users.., ..])
    }

    pub fn score(&self, u: usize, i: usize) -> f64 {
        self.user(u).dot(&self.item(i))
    }

    /// `y_ui = ⟨E*_u, E*_i⟩` for each requested item.
    pub fn predict_scores(&self, u: usize, items: &[u32]) -> Result<Vec<f64>> {
        if u >= self.num_users {
            return Err(Error::IndexOutOfRange(format!("user {u} (have {})", self.num_users)));
        }
        if let Some(&bad) = items.iter().find(|&&i| i as usize >= self.num_items()) {
            return Err(Error::IndexOutOfRange(format!(
                "item {bad} (have {})",
                self.num_items()
            )));
        }
        Ok(items.iter().map(|&i| self.score(u, i as usize)).collect())
    }

    /// Scores of one user against every item.
    pub fn all_scores(&self, u: usize) -> Array1<f64> {
        self.items().dot(&self.user(u))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingTriple {
    pub user: u32,
    pub positive: u32,
    pub negative: u32,
}

/// BPR loss value and its cotangents.
#[derive(Debug, Clone)]
pub struct BprOutput {
    pub loss: f64,
    /// `∂loss/∂E_*`
    pub grad_final: Array2<f64>,
    /// `∂loss/∂E(0)` from the L2 term only.
    pub grad_initial: Array2<f64>,
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `−(1/B)·Σ ln σ(y_ui − y_uj) + λ·(‖e_u⁰‖² + ‖e_i⁰‖² + ‖e_j⁰‖²)/B`.
pub fn bpr_loss(
    final_emb: &FinalEmbeddings,
    initial: &Array2<f64>,
    triples: &[TrainingTriple],
    l2_lambda: f64,
) -> Result<BprOutput> {
    if triples.is_empty() {
        return Err(Error::Config("BPR batch is empty".into()));
    }
    let nu = final_emb.num_users();
    let ni = final_emb.num_items();
    let b = triples.len() as f64;
    let mut grad_final = Array2::zeros(final_emb.matrix().raw_dim());
    let mut grad_initial = Array2::zeros(initial.raw_dim());
    let mut ranking = 0.0;
    let mut reg = 0.0;
    for t in triples {
        let (u, i, j) = (t.user as usize, t.positive as usize, t.negative as usize);
        if u >= nu || i >= ni || j >= ni {
            return Err(Error::IndexOutOfRange(format!("triple ({u}, {i}, {j})")));
        }
        let eu = final_emb.user(u);
        let ei = final_emb.item(i);
        let ej = final_emb.item(j);
        let x = eu.dot(&ei) - eu.dot(&ej);
        ranking += softplus(-x);
        // d softplus(−x)/dx = −σ(−x)
        let g = -sigmoid(-x) / b;
        let diff = &ei - &ej;
        grad_final.row_mut(u).scaled_add(g, &diff);
        grad_final.row_mut(nu + i).scaled_add(g, &eu);
        grad_final.row_mut(nu + j).scaled_add(-g, &eu);

        if l2_lambda > 0.0 {
            for row in [u, nu + i, nu + j] {
                let e0 = initial.row(row);
                reg += e0.dot(&e0);
                grad_initial.row_mut(row).scaled_add(2.0 * l2_lambda / b, &e0);
            }
        }
    }
    Ok(BprOutput {
        loss: ranking / b + l2_lambda * reg / b,
        grad_final,
        grad_initial,
    })
}

/// A model configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub state: ModelState,
    num_users: usize,
    num_items: usize,
}

impl Model {
    /// Seeded initialisation: `E(0) ~ N(0, init_std²)`, discrete weights 1,
    /// controller with `1/√fan_in` normal weights.
    pub fn new(config: ModelConfig, num_users: usize, num_items: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let n = num_users + num_items;
        let embeddings = Array2::from_shape_simple_fn((n, config.embedding_dim), || normal.sample(&mut rng));
        let (controller, node_weights) = match config.variant {
            Variant::NoWeight => (None, None),
            Variant::DiscreteWeight => (None, Some(Array1::ones(n))),
            Variant::Controlled => (
                Some(WeightController::random(
                    config.embedding_dim,
                    config.hidden_dim(),
                    &mut rng,
                )),
                None,
            ),
        };
        Ok(Model {
            config,
            state: ModelState {
                embeddings,
                controller,
                node_weights,
            },
            num_users,
            num_items,
        })
    }

    pub fn from_parts(config: ModelConfig, state: ModelState, num_users: usize) -> Result<Self> {
        config.validate()?;
        let n = state.embeddings.nrows();
        if num_users > n || state.embeddings.ncols() != config.embedding_dim {
            return Err(Error::Dimension("embedding shape disagrees with configuration".into()));
        }
        let ok = match config.variant {
            Variant::NoWeight => state.controller.is_none() && state.node_weights.is_none(),
            Variant::DiscreteWeight => {
                state.controller.is_none() && state.node_weights.as_ref().is_some_and(|w| w.len() == n)
            }
            Variant::Controlled => {
                state.node_weights.is_none()
                    && state
                        .controller
                        .as_ref()
                        .is_some_and(|c| c.input_dim() == config.embedding_dim)
            }
        };
        if !ok {
            return Err(Error::Config(format!(
                "parameters do not match variant {}",
                config.variant
            )));
        }
        Ok(Model {
            config,
            state,
            num_users,
            num_items: n - num_users,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn weight_source(&self) -> WeightSource<'_> {
        match self.config.variant {
            Variant::NoWeight => WeightSource::Unit,
            Variant::DiscreteWeight => {
                WeightSource::Fixed(self.state.node_weights.as_ref().expect("variant invariant"))
            }
            Variant::Controlled => WeightSource::Controlled(self.state.controller.as_ref().expect("variant invariant")),
        }
    }

    pub fn dynamics<'a>(&'a self, op: &'a PropagationOperator) -> Result<GraphDynamics<'a>> {
        self.check_graph(op)?;
        GraphDynamics::new(op, self.weight_source())
    }

    fn check_graph(&self, op: &PropagationOperator) -> Result<()> {
        if op.node_count() != self.state.embeddings.nrows() {
            return Err(Error::Dimension(format!(
                "graph has {} nodes, model has {}",
                op.node_count(),
                self.state.embeddings.nrows()
            )));
        }
        Ok(())
    }

    /// Solves the embedding ODE from `E(0)` to `t1`.
    pub fn forward(&self, op: &PropagationOperator) -> Result<(FinalEmbeddings, SolveTrace)> {
        let f = self.dynamics(op)?;
        let (out, trace) = solve(&f, &self.state.embeddings, &self.config.solver)?;
        Ok((FinalEmbeddings::new(out, self.num_users)?, trace))
    }

    /// Forward pass with the weight forced to 1 whatever the variant.
    #[doc(hidden)]
    pub fn forward_bypassed(&self, op: &PropagationOperator) -> Result<(FinalEmbeddings, SolveTrace)> {
        self.check_graph(op)?;
        let f = GraphDynamics::new(op, WeightSource::Unit)?;
        let (out, trace) = solve(&f, &self.state.embeddings, &self.config.solver)?;
        Ok((FinalEmbeddings::new(out, self.num_users)?, trace))
    }

    /// BPR loss over a batch and gradients for every parameter, taken
    /// through the unrolled solver.
    pub fn loss_and_gradients(&self, op: &PropagationOperator, triples: &[TrainingTriple]) -> Result<(f64, Gradients)> {
        let f = self.dynamics(op)?;
        let (out, trace) = solve(&f, &self.state.embeddings, &self.config.solver)?;
        let final_emb = FinalEmbeddings::new(out, self.num_users)?;
        let bpr = bpr_loss(&final_emb, &self.state.embeddings, triples, self.config.l2_lambda)?;
        let mut pgrad = DynamicsGrad::for_source(f.source());
        let mut grad_e0 = backward(&f, &trace, &bpr.grad_final, &mut pgrad)?;
        grad_e0 += &bpr.grad_initial;
        Ok((
            bpr.loss,
            Gradients {
                embeddings: grad_e0,
                controller: pgrad.controller,
                node_weights: pgrad.node_weights,
            },
        ))
    }

    /// Per-node weights at each solver state `t0, t0 + h, ..., t1`.
    pub fn weight_trajectory(&self, op: &PropagationOperator, trace: &SolveTrace) -> Result<Vec<(f64, Array1<f64>)>> {
        let f = self.dynamics(op)?;
        trace
            .states()
            .map(|(t, state)| Ok((t, f.node_weights(state)?)))
            .collect()
    }
}
