//! L1-style adaptive augmentation: a twist predictor with piecewise-constant
//! disturbance adaptation and a first-order low-pass filter whose output is
//! subtracted from the nominal controller wrench.

use nalgebra::Vector6;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lie::{adjoint_small, Twist};
use crate::vessel::{damping_matrix, VesselModel};

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum L1Error {
    #[error("predictor gain must be Hurwitz: entry {index} is {value}")]
    NotHurwitz { index: usize, value: f64 },
    #[error("filter bandwidth must be non-negative")]
    NegativeBandwidth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L1Config {
    /// Diagonal of the (negated) predictor gain: `A_s = -diag(gain)`.
    /// All entries must be positive for a Hurwitz predictor.
    pub predictor_gain: [f64; 6],
    /// Low-pass bandwidth of the compensation, rad/s. Zero disables
    /// compensation entirely.
    pub filter_bandwidth: f64,
    /// Adaptation sampling period, s (the control period).
    pub adaptation_period: f64,
    /// Per-axis clamp on the raw wrench estimate, N and N m.
    pub estimate_bound: [f64; 6],
}

impl Default for L1Config {
    fn default() -> Self {
        L1Config {
            predictor_gain: [8.0; 6],
            filter_bandwidth: 1.5,
            adaptation_period: 0.02,
            estimate_bound: [30.0, 30.0, 30.0, 60.0, 60.0, 60.0],
        }
    }
}

impl L1Config {
    pub fn validate(&self) -> Result<(), L1Error> {
        for (i, &g) in self.predictor_gain.iter().enumerate() {
            if g <= 0.0 {
                return Err(L1Error::NotHurwitz { index: i, value: -g });
            }
        }
        if self.filter_bandwidth < 0.0 {
            return Err(L1Error::NegativeBandwidth);
        }
        Ok(())
    }
}

/// Piecewise-constant L1 disturbance estimator wrapped around a nominal
/// controller's wrench.
#[derive(Debug, Clone)]
pub struct L1Augmentation {
    pub config: L1Config,
    model: VesselModel,
    predicted_twist: Twist,
    estimate: Vector6<f64>,
    filtered: Vector6<f64>,
    initialized: bool,
}

impl L1Augmentation {
    pub fn new(config: L1Config, model: VesselModel) -> Result<Self, L1Error> {
        config.validate()?;
        Ok(L1Augmentation {
            config,
            model,
            predicted_twist: Twist::zero(),
            estimate: Vector6::zeros(),
            filtered: Vector6::zeros(),
            initialized: false,
        })
    }

    pub fn raw_estimate(&self) -> &Vector6<f64> {
        &self.estimate
    }

    pub fn filtered_estimate(&self) -> &Vector6<f64> {
        &self.filtered
    }

    /// Predictor error, for post-hoc boundedness checks.
    pub fn predictor_error(&self, measured: &Twist) -> f64 {
        (self.predicted_twist.as_vector() - measured.as_vector()).norm()
    }

    /// One adaptation step. Returns the corrected wrench
    /// `nominal - filtered_estimate`, and propagates the predictor with the
    /// wrench that is actually applied.
    pub fn step(&mut self, nominal_wrench: &Vector6<f64>, measured: &Twist, dt: f64) -> Vector6<f64> {
        debug_assert!(dt > 0.0);
        if !self.initialized {
            self.predicted_twist = *measured;
            self.initialized = true;
        }

        // Piecewise-constant adaptation: with A_s = -diag(a), the exact
        // discrete error map gives sigma = -M Phi^-1 exp(A_s dt) err with
        // Phi = A_s^-1 (exp(A_s dt) - I).
        let err = self.predicted_twist.as_vector() - measured.as_vector();
        let mut accel_estimate = Vector6::zeros();
        for i in 0..6 {
            let a = self.config.predictor_gain[i];
            let mu = (-a * dt).exp();
            let phi = (1.0 - mu) / a;
            accel_estimate[i] = -(mu / phi) * err[i];
        }
        let mut sigma = self.model.mass_matrix() * accel_estimate;
        for i in 0..6 {
            sigma[i] = sigma[i].clamp(-self.config.estimate_bound[i], self.config.estimate_bound[i]);
        }
        self.estimate = sigma;

        // First-order low-pass toward the raw estimate.
        let alpha = 1.0 - (-self.config.filter_bandwidth * dt).exp();
        self.filtered += (self.estimate - self.filtered) * alpha;

        let corrected = nominal_wrench - self.filtered;

        // Predictor: nominal model + estimate, driven by the applied wrench.
        let xi = measured.as_vector();
        let hydro = adjoint_small(measured).transpose() * (self.model.mass_matrix() * xi)
            - damping_matrix(&self.model.params, measured) * xi;
        let accel = self.model.mass_inverse() * (hydro + corrected + self.estimate);
        let mut next = self.predicted_twist.as_vector() + accel * dt;
        for i in 0..6 {
            next[i] -= self.config.predictor_gain[i] * err[i] * dt;
        }
        self.predicted_twist = Twist::from_vector(&next);

        corrected
    }
}
