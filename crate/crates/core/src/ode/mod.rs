//! Fixed-step explicit integration with reverse-mode gradients through the
//! unrolled steps, plus the weight controller and graph dynamics.

mod controller;
mod dynamics;
mod solver;

pub use controller::{sigmoid, ControllerGrad, WeightController};
pub use dynamics::{DynamicsGrad, GraphDynamics, WeightSource};
pub use solver::{backward, solve, Method, OdeFunction, SolveTrace, SolverConfig, StepRecord};
