//! Stochastic binary gates: logistic-noise relaxation of a Bernoulli gate,
//! stretched to `[a, b]` and hard-thresholded back to `[0, 1]`, with an exact
//! closed-form activation probability.

use crate::autodiff::{sigmoid, AutodiffError, Graph, ValueId};
use crate::tensor::Tensor;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GateError {
    #[error("stretch bounds must satisfy a < 0 < 1 < b, got a={a}, b={b}")]
    BadStretch { a: f64, b: f64 },
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("temperature schedule needs total_steps >= 1")]
    EmptySchedule,
}

/// One gate's parameters: logit, temperature and stretch bounds.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GateState {
    /// Logit of the underlying Bernoulli probability.
    pub beta: f64,
    /// Relaxation temperature; low values concentrate samples near {0, 1}.
    pub tau: f64,
    /// Lower stretch bound, strictly negative.
    pub a: f64,
    /// Upper stretch bound, strictly greater than one.
    pub b: f64,
}

impl GateState {
    pub fn new(beta: f64, tau: f64, a: f64, b: f64) -> Result<Self, GateError> {
        if !(a < 0.0 && b > 1.0) {
            return Err(GateError::BadStretch { a, b });
        }
        if !(tau > 0.0) {
            return Err(GateError::BadTemperature(tau));
        }
        Ok(Self { beta, tau, a, b })
    }

    /// Relaxed-variable threshold below which the clipped gate is exactly 0.
    pub fn zero_threshold(&self) -> f64 {
        -self.a / (self.b - self.a)
    }

    /// Relaxed-variable threshold above which the clipped gate is exactly 1.
    pub fn one_threshold(&self) -> f64 {
        (1.0 - self.a) / (self.b - self.a)
    }
}

/// One draw through the full gate chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateSample {
    /// The uniform draw in (0, 1).
    pub uniform: f64,
    /// Sigmoid-relaxed value in (0, 1).
    pub relaxed: f64,
    /// Stretched value in (a, b).
    pub stretched: f64,
    /// Hard-thresholded gate in [0, 1].
    pub clipped: f64,
}

/// Deterministic tail of the sampling chain given the uniform draw.
pub fn sample_from_uniform(state: &GateState, uniform: f64) -> GateSample {
    debug_assert!(uniform > 0.0 && uniform < 1.0);
    let relaxed = sigmoid((uniform.ln() - (1.0 - uniform).ln() + state.beta) / state.tau);
    let stretched = state.a + (state.b - state.a) * relaxed;
    let clipped = stretched.clamp(0.0, 1.0);
    GateSample {
        uniform,
        relaxed,
        stretched,
        clipped,
    }
}

/// Draw a gate sample; uniforms landing exactly on 0 or 1 are rejected.
pub fn sample_gate(state: &GateState, rng: &mut impl Rng) -> GateSample {
    let uniform = loop {
        let d: f64 = rng.gen();
        if d > 0.0 && d < 1.0 {
            break d;
        }
    };
    sample_from_uniform(state, uniform)
}

/// Exact `P(gate != 0)` under the sampling law.
pub fn activation_probability(state: &GateState) -> f64 {
    sigmoid(state.beta - state.tau * (-state.a / state.b).ln())
}

/// Derivative of [`activation_probability`] with respect to the logit,
/// strictly positive everywhere.
pub fn activation_probability_grad(state: &GateState) -> f64 {
    let s = activation_probability(state);
    s * (1.0 - s)
}

/// Record the gate chain on a tape so gradients flow from the clipped gate
/// back to the logit leaf. The gradient is exactly zero whenever the
/// stretched value lies outside (0, 1).
pub fn gate_node(
    graph: &mut Graph,
    beta: ValueId,
    uniform: f64,
    tau: f64,
    a: f64,
    b: f64,
) -> Result<ValueId, AutodiffError> {
    let noise = uniform.ln() - (1.0 - uniform).ln();
    let shifted = graph.affine(beta, 1.0 / tau, noise / tau)?;
    let relaxed = graph.activate(shifted, crate::autodiff::Activation::Sigmoid)?;
    let stretched = graph.affine(relaxed, b - a, a)?;
    graph.clamp01(stretched)
}

/// Same chain with the gate forced to a fixed value (no noise, no gradient).
pub fn fixed_gate_node(graph: &mut Graph, value: f64) -> Result<ValueId, AutodiffError> {
    graph.constant(Tensor::scalar(value))
}

/// Temperature schedules for the relaxation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TemperatureSchedule {
    /// Linear interpolation from `start` at step 0 to `end` at the last step.
    Linear { start: f64, end: f64 },
    Constant { value: f64 },
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule::Linear {
            start: 10.0,
            end: 0.1,
        }
    }
}

pub fn anneal_temperature(
    schedule: TemperatureSchedule,
    step: usize,
    total_steps: usize,
) -> Result<f64, GateError> {
    if total_steps == 0 {
        return Err(GateError::EmptySchedule);
    }
    debug_assert!(step <= total_steps);
    Ok(match schedule {
        TemperatureSchedule::Linear { start, end } => {
            let t = step as f64 / total_steps as f64;
            start + (end - start) * t
        }
        TemperatureSchedule::Constant { value } => value,
    })
}
