//! Fourier-feature online estimator of the model residual.
//!
//! Each cycle the residual of the linearized model is measured from
//! consecutive error states, pushed into a sliding buffer, and one gradient
//! step is taken on a buffered loss
//!
//! ```text
//!   l = (1/S) sum_j ( |h~_j - A' phi_j|^2 + lambda |A' phi_j - p_{j-1}|^2 )
//! ```
//!
//! where `p_{j-1}` is the prediction recorded when sample `j-1` was
//! inserted (zero before the first sample). The data-fit term is evaluated
//! under the current weights; the smoothness anchor uses the stored
//! predictions indexed by sample time, which damps cycle-to-cycle jumps of
//! the predictor without changing past loss terms retroactively.
//!
//! Starting from zero weights the first forecast is exactly zero, so the
//! estimator is neutral until it has seen data.

use std::collections::VecDeque;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SVector, Vector2, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lie::{log_se3, LieError, Pose, Twist};
use crate::mpc::{ContinuousModel, StateVector};

/// Learner input dimension: pose log (6), twist (6), time (1).
pub const INPUT_DIM: usize = 13;
/// Residual dimension (the full error-state rate).
pub const RESIDUAL_DIM: usize = 12;

pub type LearnerInput = SVector<f64, INPUT_DIM>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeatureMapError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("feature map is empty")]
    Empty,
    #[error("feature {index} references variable {variable}, input has {INPUT_DIM}")]
    BadVariable { index: usize, variable: usize },
    #[error(transparent)]
    Lie(#[from] LieError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trig {
    Sin,
    Cos,
}

/// One scalar feature: `sin(f z_i)` or `cos(f z_i)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feature {
    pub variable: usize,
    pub trig: Trig,
    /// Frequency in radians per unit of the input variable.
    pub frequency: f64,
}

impl Feature {
    pub fn evaluate(&self, z: &LearnerInput) -> f64 {
        let arg = self.frequency * z[self.variable];
        match self.trig {
            Trig::Sin => arg.sin(),
            Trig::Cos => arg.cos(),
        }
    }
}

/// Selected feature set consumed by the online learner.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub features: Vec<Feature>,
}

impl FeatureMap {
    pub fn new(features: Vec<Feature>) -> Result<Self, FeatureMapError> {
        if features.is_empty() {
            return Err(FeatureMapError::Empty);
        }
        for (index, f) in features.iter().enumerate() {
            if f.variable >= INPUT_DIM {
                return Err(FeatureMapError::BadVariable {
                    index,
                    variable: f.variable,
                });
            }
        }
        Ok(FeatureMap { features })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn evaluate(&self, z: &LearnerInput) -> DVector<f64> {
        DVector::from_fn(self.features.len(), |k, _| self.features[k].evaluate(z))
    }

    /// Serialize as `index, variable, trig, frequency` lines. Frequencies
    /// use the shortest round-trip representation, so parse(serialize(m))
    /// reproduces the map exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# feature map: index, variable (0-based), trig, frequency (rad per unit)\n");
        for (i, f) in self.features.iter().enumerate() {
            let trig = match f.trig {
                Trig::Sin => "sin",
                Trig::Cos => "cos",
            };
            writeln!(out, "{}, {}, {}, {}", i, f.variable, trig, f.frequency).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, FeatureMapError> {
        let mut features = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            if parts.len() != 4 {
                return Err(FeatureMapError::Parse {
                    line: lineno + 1,
                    message: format!("expected 4 fields, got {}", parts.len()),
                });
            }
            let variable: usize = parts[1].parse().map_err(|e| FeatureMapError::Parse {
                line: lineno + 1,
                message: format!("bad variable index: {e}"),
            })?;
            let trig = match parts[2] {
                "sin" => Trig::Sin,
                "cos" => Trig::Cos,
                other => {
                    return Err(FeatureMapError::Parse {
                        line: lineno + 1,
                        message: format!("trig must be sin or cos, got {other}"),
                    })
                }
            };
            let frequency: f64 = parts[3].parse().map_err(|e| FeatureMapError::Parse {
                line: lineno + 1,
                message: format!("bad frequency: {e}"),
            })?;
            features.push(Feature {
                variable,
                trig,
                frequency,
            });
        }
        FeatureMap::new(features)
    }
}

/// Which pose enters the learner input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PoseInput {
    /// Absolute vehicle pose, flattened through the log map.
    #[default]
    Absolute,
    /// Error-state pose log relative to the reference.
    ErrorState,
}

/// Assemble the 13-D learner input `[log(X); xi; t]`.
pub fn learner_input(pose: &Pose, twist: &Twist, time: f64) -> Result<LearnerInput, LieError> {
    let flat = log_se3(pose)?;
    let mut z = LearnerInput::zeros();
    z.fixed_rows_mut::<6>(0).copy_from(&flat.as_vector());
    z.fixed_rows_mut::<6>(6).copy_from(&twist.as_vector());
    z[12] = time;
    Ok(z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    /// Gradient step size.
    pub step_size: f64,
    /// Temporal-smoothness weight.
    pub smoothness: f64,
    /// Sliding-buffer capacity (the control horizon by default).
    pub buffer: usize,
    /// Pose representation inside the learner input.
    pub pose_input: PoseInput,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            step_size: 1e-4,
            smoothness: 1e-4,
            buffer: 30,
            pose_input: PoseInput::Absolute,
        }
    }
}

#[derive(Debug, Clone)]
struct BufferEntry {
    phi: DVector<f64>,
    residual: SVector<f64, RESIDUAL_DIM>,
    /// Prediction made when this sample was inserted.
    prediction: SVector<f64, RESIDUAL_DIM>,
    /// Stored prediction of the preceding sample (zero before the first).
    prev_prediction: SVector<f64, RESIDUAL_DIM>,
}

/// Online residual estimator with weights `A` of shape `F x 12`.
#[derive(Debug, Clone)]
pub struct OnlineLearner {
    pub config: LearnerConfig,
    map: FeatureMap,
    weights: DMatrix<f64>,
    buffer: VecDeque<BufferEntry>,
    last_prediction: SVector<f64, RESIDUAL_DIM>,
    updates: usize,
}

impl OnlineLearner {
    pub fn new(map: FeatureMap, config: LearnerConfig) -> Self {
        let f = map.len();
        OnlineLearner {
            config,
            map,
            weights: DMatrix::zeros(f, RESIDUAL_DIM),
            buffer: VecDeque::new(),
            last_prediction: SVector::zeros(),
            updates: 0,
        }
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.map
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    /// Replace the weight matrix (snapshot restore, gradient checks).
    pub fn set_weights(&mut self, weights: DMatrix<f64>) {
        assert_eq!(weights.nrows(), self.map.len());
        assert_eq!(weights.ncols(), RESIDUAL_DIM);
        self.weights = weights;
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.len()
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    /// Residual prediction `A' phi(z)` under the current weights.
    pub fn predict(&self, z: &LearnerInput) -> SVector<f64, RESIDUAL_DIM> {
        let phi = self.map.evaluate(z);
        let out = self.weights.transpose() * phi;
        SVector::from_fn(|i, _| out[i])
    }

    /// Forecast the residual over a horizon of inputs with frozen weights.
    pub fn forecast(&self, inputs: &[LearnerInput]) -> Vec<StateVector> {
        inputs.iter().map(|z| self.predict(z)).collect()
    }

    /// Buffered loss at the current weights.
    pub fn buffered_loss(&self) -> f64 {
        self.loss_and_gradient().0
    }

    /// Analytic gradient of the buffered loss with respect to the weights.
    pub fn gradient(&self) -> DMatrix<f64> {
        self.loss_and_gradient().1
    }

    fn loss_and_gradient(&self) -> (f64, DMatrix<f64>) {
        let s = self.buffer.len();
        let mut grad = DMatrix::zeros(self.weights.nrows(), RESIDUAL_DIM);
        if s == 0 {
            return (0.0, grad);
        }
        let lambda = self.config.smoothness;
        let inv_s = 1.0 / s as f64;
        let mut loss = 0.0;
        for entry in &self.buffer {
            let pred = self.weights.transpose() * &entry.phi;
            let pred = SVector::<f64, RESIDUAL_DIM>::from_fn(|i, _| pred[i]);
            let fit = pred - entry.residual;
            let smooth = pred - entry.prev_prediction;
            loss += inv_s * (fit.norm_squared() + lambda * smooth.norm_squared());
            let coeff = fit + smooth * lambda;
            // grad += (2/S) phi coeff'
            for col in 0..RESIDUAL_DIM {
                let c = 2.0 * inv_s * coeff[col];
                for row in 0..self.weights.nrows() {
                    grad[(row, col)] += c * entry.phi[row];
                }
            }
        }
        (loss, grad)
    }

    /// Insert the newest `(input, residual)` sample and take one gradient
    /// step on the buffered loss.
    pub fn update(&mut self, z: &LearnerInput, residual: &StateVector) {
        let phi = self.map.evaluate(z);
        let pred = self.weights.transpose() * &phi;
        let prediction = SVector::<f64, RESIDUAL_DIM>::from_fn(|i, _| pred[i]);
        self.buffer.push_back(BufferEntry {
            phi,
            residual: *residual,
            prediction,
            prev_prediction: self.last_prediction,
        });
        if self.buffer.len() > self.config.buffer {
            self.buffer.pop_front();
        }
        self.last_prediction = prediction;

        let (_, grad) = self.loss_and_gradient();
        self.weights -= grad * self.config.step_size;
        self.updates += 1;
    }

    /// Sum of squared jumps between consecutive stored predictions,
    /// diagnostic for the smoothness term.
    pub fn stored_prediction_variation(&self) -> f64 {
        self.buffer
            .iter()
            .map(|e| (e.prediction - e.prev_prediction).norm_squared())
            .sum()
    }
}

/// Residual of the linearized model from consecutive error states:
/// `h~ = (x_next - x) / dt - (A x + B tau + h)`.
///
/// Both error states must be formed through the log map against their own
/// reference poses; the subtraction here is between Lie-algebra vectors,
/// never between poses.
pub fn measure_residual(
    x: &StateVector,
    x_next: &StateVector,
    tau: &Vector2<f64>,
    model: &ContinuousModel,
    dt: f64,
) -> StateVector {
    debug_assert!(dt > 0.0);
    let xdot = (x_next - x) / dt;
    xdot - (model.a * x + model.b * tau + model.h)
}
