use ndarray::{Array1, Array2, Axis, Zip};

use super::controller::{ControllerGrad, WeightController};
use super::solver::OdeFunction;
use crate::error::{Error, Result};
use crate::graph::PropagationOperator;

/// Where the per-node rate weight comes from.
#[derive(Debug, Clone, Copy)]
pub enum WeightSource<'a> {
    /// Weight ≡ 1.
    Unit,
    /// Static learned weight per node.
    Fixed(&'a Array1<f64>),
    /// `σ(mlp(E_j(t)))`, recomputed from the current state.
    Controlled(&'a WeightController),
}

impl<'a> WeightSource<'a> {
    /// At most one of the two sources may be given; neither means unit weight.
    pub fn from_options(controller: Option<&'a WeightController>, fixed: Option<&'a Array1<f64>>) -> Result<Self> {
        match (controller, fixed) {
            (Some(_), Some(_)) => Err(Error::Config(
                "derivative takes either a controller or a fixed weight, not both".into(),
            )),
            (Some(c), None) => Ok(WeightSource::Controlled(c)),
            (None, Some(w)) => Ok(WeightSource::Fixed(w)),
            (None, None) => Ok(WeightSource::Unit),
        }
    }
}

/// `dE/dt = w(E) ⊙ (Ãⁿ − I)·E`, the weight broadcast across embedding
/// dimensions. Autonomous: `t` is ignored.
#[derive(Debug, Clone, Copy)]
pub struct GraphDynamics<'a> {
    op: &'a PropagationOperator,
    weights: WeightSource<'a>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsGrad {
    pub controller: Option<ControllerGrad>,
    pub node_weights: Option<Array1<f64>>,
}

impl DynamicsGrad {
    pub fn for_source(source: &WeightSource<'_>) -> Self {
        match source {
            WeightSource::Unit => DynamicsGrad {
                controller: None,
                node_weights: None,
            },
            WeightSource::Fixed(w) => DynamicsGrad {
                controller: None,
                node_weights: Some(Array1::zeros(w.len())),
            },
            WeightSource::Controlled(c) => DynamicsGrad {
                controller: Some(ControllerGrad::zeros_like(c)),
                node_weights: None,
            },
        }
    }
}

fn scale_rows(m: &mut Array2<f64>, w: &Array1<f64>) {
    Zip::from(m.axis_iter_mut(Axis(0)))
        .and(w)
        .for_each(|mut row, &s| row *= s);
}

impl<'a> GraphDynamics<'a> {
    pub fn new(op: &'a PropagationOperator, weights: WeightSource<'a>) -> Result<Self> {
        if let WeightSource::Fixed(w) = weights {
            if w.len() != op.node_count() {
                return Err(Error::Dimension(format!(
                    "fixed weight has {} entries, graph has {} nodes",
                    w.len(),
                    op.node_count()
                )));
            }
        }
        Ok(GraphDynamics { op, weights })
    }

    pub fn source(&self) -> &WeightSource<'a> {
        &self.weights
    }

    /// Per-node weight at `state`.
    pub fn node_weights(&self, state: &Array2<f64>) -> Result<Array1<f64>> {
        match self.weights {
            WeightSource::Unit => Ok(Array1::ones(state.nrows())),
            WeightSource::Fixed(w) => Ok(w.clone()),
            WeightSource::Controlled(c) => c.weights(state),
        }
    }
}

impl OdeFunction for GraphDynamics<'_> {
    type ParamGrad = DynamicsGrad;

    fn eval(&self, _t: f64, state: &Array2<f64>) -> Result<Array2<f64>> {
        let mut out = self.op.apply(state.view())?;
        match self.weights {
            WeightSource::Unit => {}
            WeightSource::Fixed(w) => scale_rows(&mut out, w),
            WeightSource::Controlled(c) => scale_rows(&mut out, &c.weights(state)?),
        }
        Ok(out)
    }

    fn vjp(
        &self,
        _t: f64,
        state: &Array2<f64>,
        cotangent: &Array2<f64>,
        grad: &mut DynamicsGrad,
    ) -> Result<Array2<f64>> {
        if matches!(self.weights, WeightSource::Unit) {
            return self.op.apply(cotangent.view());
        }
        let propagated = self.op.apply(state.view())?;
        // ∂L/∂w_j = Σ_k G_jk · P_jk
        let dweight = (cotangent * &propagated).sum_axis(Axis(1));
        let (weights, dstate) = match self.weights {
            WeightSource::Fixed(w) => {
                let g = grad
                    .node_weights
                    .as_mut()
                    .ok_or_else(|| Error::Config("gradient holder lacks node weights".into()))?;
                *g += &dweight;
                (w.clone(), None)
            }
            WeightSource::Controlled(c) => {
                let g = grad
                    .controller
                    .as_mut()
                    .ok_or_else(|| Error::Config("gradient holder lacks controller".into()))?;
                let (w, ds) = c.weights_and_vjp(state, &dweight, g)?;
                (w, Some(ds))
            }
            WeightSource::Unit => unreachable!(),
        };
        let mut scaled = cotangent.clone();
        scale_rows(&mut scaled, &weights);
        // (Ãⁿ − I) is symmetric.
        let through_graph = self.op.apply(scaled.view())?;
        Ok(match dstate {
            Some(ds) => through_graph + ds,
            None => through_graph,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NormalizedAdjacency;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_op() -> PropagationOperator {
        let edges = [(0, 0), (0, 1), (1, 1), (2, 2), (1, 3), (2, 0)];
        PropagationOperator::new(NormalizedAdjacency::from_edges(3, 4, &edges).unwrap(), 2).unwrap()
    }

    fn random_state(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn unit_weight_equals_propagation() {
        let op = small_op();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = random_state(&mut rng, 7, 3);
        let f = GraphDynamics::new(&op, WeightSource::Unit).unwrap();
        assert_eq!(f.eval(0.0, &e).unwrap(), op.apply(e.view()).unwrap());
    }

    #[test]
    fn zero_state_zero_derivative() {
        let op = small_op();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = WeightController::random(3, 2, &mut rng);
        let f = GraphDynamics::new(&op, WeightSource::Controlled(&c)).unwrap();
        assert!(f.eval(0.0, &Array2::zeros((7, 3))).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_controller_halves_rate() {
        let op = small_op();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = random_state(&mut rng, 7, 4);
        let c = WeightController::zeros(4, 2);
        let controlled = GraphDynamics::new(&op, WeightSource::Controlled(&c))
            .unwrap()
            .eval(0.0, &e)
            .unwrap();
        let plain = GraphDynamics::new(&op, WeightSource::Unit)
            .unwrap()
            .eval(0.0, &e)
            .unwrap();
        assert_abs_diff_eq!(controlled, plain * 0.5, epsilon = 1e-12);
    }

    #[test]
    fn both_sources_rejected() {
        let c = WeightController::zeros(2, 1);
        let w = Array1::ones(3);
        assert!(WeightSource::from_options(Some(&c), Some(&w)).is_err());
        assert!(matches!(WeightSource::from_options(None, None), Ok(WeightSource::Unit)));
    }

    #[test]
    fn fixed_weight_length_checked() {
        let op = small_op();
        let w = Array1::ones(3);
        assert!(GraphDynamics::new(&op, WeightSource::Fixed(&w)).is_err());
    }

    // Central-difference check of ⟨G, f(E)⟩ against the vjp.
    #[test]
    fn vjp_matches_finite_difference() {
        let op = small_op();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let e = random_state(&mut rng, 7, 3);
        let g = random_state(&mut rng, 7, 3);
        let mut c = WeightController::random(3, 2, &mut rng);
        c.b2 = 0.3;
        let fixed = Array1::from_shape_fn(7, |_| rng.random_range(0.5..1.5));
        let sources = [
            WeightSource::Unit,
            WeightSource::Fixed(&fixed),
            WeightSource::Controlled(&c),
        ];
        for src in sources {
            let f = GraphDynamics::new(&op, src).unwrap();
            let mut pg = DynamicsGrad::for_source(&src);
            let de = f.vjp(0.0, &e, &g, &mut pg).unwrap();
            let eps = 1e-6;
            for idx in 0..e.len() {
                let mut ep = e.clone();
                let mut em = e.clone();
                ep.as_slice_mut().unwrap()[idx] += eps;
                em.as_slice_mut().unwrap()[idx] -= eps;
                let fd =
                    ((&g * &f.eval(0.0, &ep).unwrap()).sum() - (&g * &f.eval(0.0, &em).unwrap()).sum()) / (2.0 * eps);
                assert!((fd - de.as_slice().unwrap()[idx]).abs() < 1e-8, "{src:?} idx {idx}");
            }
            if let Some(gw) = &pg.node_weights {
                for j in 0..7 {
                    let mut wp = fixed.clone();
                    let mut wm = fixed.clone();
                    wp[j] += eps;
                    wm[j] -= eps;
                    let fp = GraphDynamics::new(&op, WeightSource::Fixed(&wp))
                        .unwrap()
                        .eval(0.0, &e)
                        .unwrap();
                    let fm = GraphDynamics::new(&op, WeightSource::Fixed(&wm))
                        .unwrap()
                        .eval(0.0, &e)
                        .unwrap();
                    let fd = ((&g * &fp).sum() - (&g * &fm).sum()) / (2.0 * eps);
                    assert!((fd - gw[j]).abs() < 1e-8);
                }
            }
        }
    }
}
