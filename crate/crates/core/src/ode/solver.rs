use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
}

impl Method {
    pub fn stages(self) -> usize {
        match self {
            Method::Euler => 1,
            Method::Rk4 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Euler => "euler",
            Method::Rk4 => "rk4",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            other => Err(Error::Config(format!(
                "unknown solver '{other}' (expected euler or rk4)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub method: Method,
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: Method::Euler,
            t0: 0.0,
            t1: 6.5,
            steps: 7,
        }
    }
}

impl SolverConfig {
    pub fn new(method: Method, t1: f64, steps: usize) -> Self {
        SolverConfig {
            method,
            t0: 0.0,
            t1,
            steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.t0.is_finite() || !self.t1.is_finite() || self.t1 <= self.t0 {
            return Err(Error::Config(format!(
                "solver needs t1 > t0, got t0={} t1={}",
                self.t0, self.t1
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("solver needs at least one step".into()));
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        (self.t1 - self.t0) / self.steps as f64
    }

    /// Time at the start of step `k`.
    pub fn time_at(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.step_size()
    }
}

/// A right-hand side `dE/dt = f(t, E)` that can also pull cotangents back
/// through itself.
pub trait OdeFunction {
    /// Accumulator for gradients with respect to the function's parameters.
    type ParamGrad;

    fn eval(&self, t: f64, state: &Array2<f64>) -> Result<Array2<f64>>;

    /// Returns `(∂f/∂state)ᵀ · cotangent` and adds `(∂f/∂θ)ᵀ · cotangent`
    /// into `param_grad`.
    fn vjp(
        &self,
        t: f64,
        state: &Array2<f64>,
        cotangent: &Array2<f64>,
        param_grad: &mut Self::ParamGrad,
    ) -> Result<Array2<f64>>;
}

/// Inputs of every stage of one solver step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub time: f64,
    /// `stages[0]` is the step's starting state; RK4 adds the three
    /// intermediate stage inputs.
    pub stages: Vec<Array2<f64>>,
}

impl StepRecord {
    pub fn state(&self) -> &Array2<f64> {
        &self.stages[0]
    }
}

#[derive(Debug, Clone)]
pub struct SolveTrace {
    pub config: SolverConfig,
    pub steps: Vec<StepRecord>,
    pub final_state: Array2<f64>,
}

impl SolveTrace {
    /// States at `t0, t0 + h, ..., t1` (N + 1 entries).
    pub fn states(&self) -> impl Iterator<Item = (f64, &Array2<f64>)> {
        self.steps
            .iter()
            .map(|s| (s.time, s.state()))
            .chain(std::iter::once((self.config.t1, &self.final_state)))
    }
}

fn check_finite(state: &Array2<f64>, step: usize) -> Result<()> {
    if state.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged { step })
    }
}

/// Integrates from `cfg.t0` to `cfg.t1` in `cfg.steps` fixed steps.
pub fn solve<F: OdeFunction>(f: &F, initial: &Array2<f64>, cfg: &SolverConfig) -> Result<(Array2<f64>, SolveTrace)> {
    cfg.validate()?;
    check_finite(initial, 0)?;
    let h = cfg.step_size();
    let mut state = initial.clone();
    let mut steps = Vec::with_capacity(cfg.steps);
    for k in 0..cfg.steps {
        let t = cfg.time_at(k);
        let next = match cfg.method {
            Method::Euler => {
                let k1 = f.eval(t, &state)?;
                let next = &state + &(k1 * h);
                steps.push(StepRecord {
                    time: t,
                    stages: vec![state],
                });
                next
            }
            Method::Rk4 => {
                let k1 = f.eval(t, &state)?;
                let y2 = &state + &(&k1 * (h / 2.0));
                let k2 = f.eval(t + h / 2.0, &y2)?;
                let y3 = &state + &(&k2 * (h / 2.0));
                let k3 = f.eval(t + h / 2.0, &y3)?;
                let y4 = &state + &(&k3 * h);
                let k4 = f.eval(t + h, &y4)?;
                let mut incr = k1;
                incr.scaled_add(2.0, &k2);
                incr.scaled_add(2.0, &k3);
                incr += &k4;
                let next = &state + &(incr * (h / 6.0));
                steps.push(StepRecord {
                    time: t,
                    stages: vec![state, y2, y3, y4],
                });
                next
            }
        };
        check_finite(&next, k + 1)?;
        state = next;
    }
    let trace = SolveTrace {
        config: *cfg,
        steps,
        final_state: state.clone(),
    };
    Ok((state, trace))
}

/// Reverse-mode gradient of the unrolled solve: given `∂L/∂E(t1)`, returns
/// `∂L/∂E(t0)` and accumulates parameter gradients into `param_grad`.
pub fn backward<F: OdeFunction>(
    f: &F,
    trace: &SolveTrace,
    grad_final: &Array2<f64>,
    param_grad: &mut F::ParamGrad,
) -> Result<Array2<f64>> {
    let cfg = &trace.config;
    if trace.steps.len() != cfg.steps {
        return Err(Error::TraceMismatch(format!(
            "trace holds {} steps, solver expects {}",
            trace.steps.len(),
            cfg.steps
        )));
    }
    if grad_final.raw_dim() != trace.final_state.raw_dim() {
        return Err(Error::TraceMismatch("cotangent shape differs from state".into()));
    }
    let stages = cfg.method.stages();
    if let Some(bad) = trace.steps.iter().position(|s| s.stages.len() != stages) {
        return Err(Error::TraceMismatch(format!(
            "step {bad} does not match the {:?} tableau",
            cfg.method
        )));
    }

    let h = cfg.step_size();
    let mut grad = grad_final.clone();
    for record in trace.steps.iter().rev() {
        let t = record.time;
        grad = match cfg.method {
            Method::Euler => {
                let pulled = f.vjp(t, &record.stages[0], &(&grad * h), param_grad)?;
                grad + pulled
            }
            Method::Rk4 => {
                let [y1, y2, y3, y4] = [
                    &record.stages[0],
                    &record.stages[1],
                    &record.stages[2],
                    &record.stages[3],
                ];
                let dk4 = &grad * (h / 6.0);
                let mut dk3 = &grad * (h / 3.0);
                let mut dk2 = &grad * (h / 3.0);
                let mut dk1 = &grad * (h / 6.0);
                let mut dy = grad;

                let u4 = f.vjp(t + h, y4, &dk4, param_grad)?;
                dy += &u4;
                dk3.scaled_add(h, &u4);

                let u3 = f.vjp(t + h / 2.0, y3, &dk3, param_grad)?;
                dy += &u3;
                dk2.scaled_add(h / 2.0, &u3);

                let u2 = f.vjp(t + h / 2.0, y2, &dk2, param_grad)?;
                dy += &u2;
                dk1.scaled_add(h / 2.0, &u2);

                let u1 = f.vjp(t, y1, &dk1, param_grad)?;
                dy += &u1;
                dy
            }
        };
    }
    Ok(grad)
}
