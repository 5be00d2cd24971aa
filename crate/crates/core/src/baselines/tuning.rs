//! MPC weight tuning through an LQR approximation on the planar subsystem.
//!
//! The vessel is planar and underactuated: heave, roll, and pitch carry no
//! control authority and the corresponding error-state integrators sit at
//! the unit circle, so a DARE over the full 12-D state cannot converge.
//! Tuning therefore reduces to the six planar states (yaw error, planar
//! position error, yaw rate, surge, sway) linearized at a straight-line
//! cruise reference.

use nalgebra::{Complex, DMatrix, Matrix6, SMatrix, Vector3};

use crate::baselines::dare::{solve_dare, DareError};
use crate::lie::Twist;
use crate::mpc::{continuous_model, output_map, thrust_map, MpcConfig, PLANAR_INDICES, STATE_DIM};
use crate::vessel::VesselModel;

/// Planar tuning output: cost-to-go, gain, and eigenvalue screening.
#[derive(Debug, Clone)]
pub struct PlanarTuning {
    /// DARE solution over the planar deviation state.
    pub p: Matrix6<f64>,
    /// Stabilizing feedback gain (thrusts from planar deviation state).
    pub k: SMatrix<f64, 2, 6>,
    pub closed_loop_eigenvalues: Vec<Complex<f64>>,
    pub spectral_radius: f64,
    pub has_complex_pairs: bool,
    pub max_real_part: f64,
    pub residual: f64,
}

/// Discrete planar `(A, B)` at a straight-line reference of the given speed.
pub fn planar_discrete_pair(
    model: &VesselModel,
    dt: f64,
    cruise_speed: f64,
) -> (Matrix6<f64>, SMatrix<f64, 6, 2>) {
    let xi_d = Twist::new(Vector3::zeros(), Vector3::new(cruise_speed, 0.0, 0.0));
    let t_map = thrust_map(model.params.thruster_lever_arm);
    let cont = continuous_model(model, &t_map, &xi_d);
    let a_full = crate::mpc::StateMatrix::identity() + cont.a * dt;
    let b_full = cont.b * dt;
    let mut a = Matrix6::zeros();
    let mut b = SMatrix::<f64, 6, 2>::zeros();
    for (i, &gi) in PLANAR_INDICES.iter().enumerate() {
        for (j, &gj) in PLANAR_INDICES.iter().enumerate() {
            a[(i, j)] = a_full[(gi, gj)];
        }
        b[(i, 0)] = b_full[(gi, 0)];
        b[(i, 1)] = b_full[(gi, 1)];
    }
    (a, b)
}

/// Solve the planar DARE with the MPC's stage weights mapped into state
/// coordinates (`Q_x = G' Q G` restricted to the planar indices).
pub fn tune_planar(
    model: &VesselModel,
    config: &MpcConfig,
    cruise_speed: f64,
) -> Result<PlanarTuning, DareError> {
    let xi_d = Twist::new(Vector3::zeros(), Vector3::new(cruise_speed, 0.0, 0.0));
    let (a, b) = planar_discrete_pair(model, config.dt, cruise_speed);

    let g = output_map(&xi_d);
    let mut q_full = crate::mpc::StateMatrix::zeros();
    for i in 0..STATE_DIM {
        for j in 0..STATE_DIM {
            let mut acc = 0.0;
            for k in 0..STATE_DIM {
                acc += g[(k, i)] * config.q_diag[k] * g[(k, j)];
            }
            q_full[(i, j)] = acc;
        }
    }

    let mut q = DMatrix::zeros(6, 6);
    for (i, &gi) in PLANAR_INDICES.iter().enumerate() {
        for (j, &gj) in PLANAR_INDICES.iter().enumerate() {
            q[(i, j)] = q_full[(gi, gj)];
        }
    }
    let r = DMatrix::from_fn(2, 2, |i, j| if i == j { config.r_diag[i] } else { 0.0 });

    let a_d = DMatrix::from_fn(6, 6, |i, j| a[(i, j)]);
    let b_d = DMatrix::from_fn(6, 2, |i, j| b[(i, j)]);
    let result = solve_dare(&a_d, &b_d, &q, &r)?;

    Ok(PlanarTuning {
        p: Matrix6::from_fn(|i, j| result.p[(i, j)]),
        k: SMatrix::<f64, 2, 6>::from_fn(|i, j| result.k[(i, j)]),
        closed_loop_eigenvalues: result.closed_loop_eigenvalues,
        spectral_radius: result.spectral_radius,
        has_complex_pairs: result.has_complex_pairs,
        max_real_part: result.max_real_part,
        residual: result.residual,
    })
}
