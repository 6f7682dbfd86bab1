use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Two-layer MLP `d → H → 1` with tanh hidden units; a node's weight is the
/// sigmoid of its output.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightController {
    /// `H × d`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
}

/// Gradient with the same layout as [`WeightController`].
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerGrad {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
}

struct Activations {
    hidden: Array2<f64>,
    weights: Array1<f64>,
}

impl WeightController {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        WeightController {
            w1: Array2::zeros((hidden_dim, input_dim)),
            b1: Array1::zeros(hidden_dim),
            w2: Array1::zeros(hidden_dim),
            b2: 0.0,
        }
    }

    /// Normal init scaled by `1/√fan_in`, zero biases.
    pub fn random<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let n1 = Normal::new(0.0, 1.0 / (input_dim as f64).sqrt()).expect("valid std");
        let n2 = Normal::new(0.0, 1.0 / (hidden_dim as f64).sqrt()).expect("valid std");
        WeightController {
            w1: Array2::from_shape_simple_fn((hidden_dim, input_dim), || n1.sample(rng)),
            b1: Array1::zeros(hidden_dim),
            w2: Array1::from_shape_simple_fn(hidden_dim, || n2.sample(rng)),
            b2: 0.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    fn activations(&self, state: &Array2<f64>) -> Result<Activations> {
        if state.ncols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "controller expects {} features, state has {}",
                self.input_dim(),
                state.ncols()
            )));
        }
        if let Some(node) = state.rows().into_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteInput { node });
        }
        let mut hidden = state.dot(&self.w1.t());
        hidden += &self.b1;
        hidden.mapv_inplace(f64::tanh);
        let weights = (hidden.dot(&self.w2) + self.b2).mapv(sigmoid);
        Ok(Activations { hidden, weights })
    }

    /// Pre-sigmoid output for every row of `state`.
    pub fn pre_activation(&self, state: &Array2<f64>) -> Result<Array1<f64>> {
        let acts = self.activations(state)?;
        Ok(acts.hidden.dot(&self.w2) + self.b2)
    }

    /// Per-node weights in (0, 1); row `j` depends only on `state.row(j)`.
    pub fn weights(&self, state: &Array2<f64>) -> Result<Array1<f64>> {
        Ok(self.activations(state)?.weights)
    }

    /// Given `∂L/∂w` per node, accumulates parameter gradients into `grad`
    /// and returns the weights with `∂L/∂state`.
    pub fn weights_and_vjp(
        &self,
        state: &Array2<f64>,
        weight_cotangent: &Array1<f64>,
        grad: &mut ControllerGrad,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        let acts = self.activations(state)?;
        let dpre = weight_cotangent * &acts.weights.mapv(|w| w * (1.0 - w));
        grad.w2.scaled_add(1.0, &acts.hidden.t().dot(&dpre));
        grad.b2 += dpre.sum();
        // dZ = (dpre ⊗ w2) ⊙ (1 − A²)
        let mut dz = acts.hidden.mapv(|a| 1.0 - a * a);
        for (mut row, &g) in dz.axis_iter_mut(Axis(0)).zip(dpre.iter()) {
            row *= &(&self.w2 * g);
        }
        grad.w1.scaled_add(1.0, &dz.t().dot(state));
        grad.b1.scaled_add(1.0, &dz.sum_axis(Axis(0)));
        let dstate = dz.dot(&self.w1);
        Ok((acts.weights, dstate))
    }
}

impl ControllerGrad {
    pub fn zeros_like(c: &WeightController) -> Self {
        ControllerGrad {
            w1: Array2::zeros(c.w1.raw_dim()),
            b1: Array1::zeros(c.b1.raw_dim()),
            w2: Array1::zeros(c.w2.raw_dim()),
            b2: 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // Per-element reference evaluation with explicit loops.
    fn reference_weight(c: &WeightController, row: &[f64]) -> f64 {
        let mut out = c.b2;
        for h in 0..c.hidden_dim() {
            let mut z = c.b1[h];
            for (k, x) in row.iter().enumerate() {
                z += c.w1[[h, k]] * x;
            }
            out += c.w2[h] * z.tanh();
        }
        1.0 / (1.0 + (-out).exp())
    }

    #[test]
    fn zero_params_give_half() {
        let c = WeightController::zeros(4, 2);
        let w = c.weights(&Array2::from_elem((5, 4), 3.0)).unwrap();
        assert!(w.iter().all(|&v| v == 0.5));
        assert_eq!(c.param_count(), 4 * 2 + 2 + 2 + 1);
    }

    #[test]
    fn duplicate_rows_same_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = WeightController::random(3, 2, &mut rng);
        let e = array![[0.1, 0.2, 0.3], [1.0, -1.0, 0.5], [0.1, 0.2, 0.3]];
        let w = c.weights(&e).unwrap();
        assert_eq!(w[0], w[2]);
    }

    #[test]
    fn matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let mut c = WeightController::random(4, 3, &mut rng);
            c.b1 = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
            c.b2 = rng.random_range(-1.0..1.0);
            let e = Array2::from_shape_fn((3, 4), |_| rng.random_range(-2.0..2.0));
            let w = c.weights(&e).unwrap();
            for j in 0..3 {
                let r = reference_weight(&c, e.row(j).as_slice().unwrap());
                assert!((w[j] - r).abs() < 1e-12);
                assert!(w[j] > 0.0 && w[j] < 1.0);
            }
        }
    }

    #[test]
    fn non_finite_input_names_node() {
        let c = WeightController::zeros(2, 1);
        let e = array![[0.0, 1.0], [f64::NAN, 0.0]];
        assert!(matches!(c.weights(&e), Err(Error::NonFiniteInput { node: 1 })));
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0).is_finite());
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn vjp_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut c = WeightController::random(3, 2, &mut rng);
        c.b1 = array![0.2, -0.3];
        c.b2 = 0.1;
        let e = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let coef = array![0.5, -1.0, 2.0, 0.25];
        let loss = |c: &WeightController, e: &Array2<f64>| c.weights(e).unwrap().dot(&coef);

        let mut g = ControllerGrad::zeros_like(&c);
        let (_, de) = c.weights_and_vjp(&e, &coef, &mut g).unwrap();
        let eps = 1e-6;
        for idx in 0..e.len() {
            let mut ep = e.clone();
            let mut em = e.clone();
            ep.as_slice_mut().unwrap()[idx] += eps;
            em.as_slice_mut().unwrap()[idx] -= eps;
            let fd = (loss(&c, &ep) - loss(&c, &em)) / (2.0 * eps);
            assert!((fd - de.as_slice().unwrap()[idx]).abs() < 1e-8);
        }
        for idx in 0..c.w1.len() {
            let mut cp = c.clone();
            let mut cm = c.clone();
            cp.w1.as_slice_mut().unwrap()[idx] += eps;
            cm.w1.as_slice_mut().unwrap()[idx] -= eps;
            let fd = (loss(&cp, &e) - loss(&cm, &e)) / (2.0 * eps);
            assert!((fd - g.w1.as_slice().unwrap()[idx]).abs() < 1e-8);
        }
        let mut cp = c.clone();
        cp.b2 += eps;
        let mut cm = c.clone();
        cm.b2 -= eps;
        assert!(((loss(&cp, &e) - loss(&cm, &e)) / (2.0 * eps) - g.b2).abs() < 1e-8);
    }
}
