//! Trajectory-tracking control stack for underactuated surface vessels.
//!
//! The crate is organized bottom-up:
//!
//! - [`lie`]: exact SE(3)/SO(3) group and algebra operations.
//! - [`vessel`]: 6-DOF marine-craft dynamics (rigid body + added mass +
//!   damping), disturbance generators, and a fixed-step RK4 plant.
//! - [`qp`]: deterministic ADMM solver for box-constrained convex QPs.
//! - [`mpc`]: convex error-state MPC in the Lie algebra, built around a
//!   two-propeller thrust parameterization.
//! - [`learner`]: Fourier-feature online estimator of the model residual,
//!   used to feed disturbance forecasts into the MPC horizon.
//! - [`extractor`]: offline bi-level optimization that learns frequencies
//!   and sparse amplitudes from logged residual datasets and selects a
//!   compact feature map.
//! - [`baselines`]: two-layer PID, L1-style adaptive augmentation, and a
//!   DARE tuning utility.
//! - [`harness`]: scenario configs, closed-loop simulation trials, metrics,
//!   dataset collection, and report emission.

pub mod baselines;
pub mod extractor;
pub mod harness;
pub mod learner;
pub mod lie;
pub mod mpc;
pub mod qp;
pub mod vessel;

pub use lie::{Pose, Rotation, Twist};
pub use vessel::{DisturbanceSpec, PlantState, VesselModel, VesselParams};
