//! 6-DOF marine-craft dynamics: rigid-body plus added mass, quadratic
//! damping, disturbance generators, and a fixed-step RK4 plant used as
//! ground truth by the simulation harness.
//!
//! The twist ordering is `[omega; v]` everywhere; the conventional marine
//! ordering (linear first) only appears in coefficient names. Damping
//! coefficients are stored as hydrodynamic derivatives (negative for a
//! dissipative vessel), so the damping matrix of `damping_matrix` has
//! non-negative diagonal entries and enters the momentum balance with a
//! minus sign.

use nalgebra::{Matrix3, Matrix4, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lie::{adjoint_small, hat3, hat6, Pose, Rotation, Twist};

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum DynamicsError {
    /// Combined mass matrix is singular or nearly so.
    #[error("combined mass matrix is not invertible (condition estimate {cond:.3e})")]
    SingularMass { cond: f64 },
    /// Combined mass matrix must be symmetric positive definite.
    #[error("combined mass matrix is not symmetric positive definite")]
    MassNotSpd,
}

/// Physical vessel parameters. All quantities SI.
///
/// `linear_damping` holds `{K_p, M_q, N_r, X_u, Y_v, Z_w}` and
/// `quadratic_damping` holds `{K_|p|p, M_|q|q, N_|r|r, X_|u|u, Y_|v|v,
/// Z_|w|w}`, both in twist order (angular axes first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselParams {
    /// Vessel mass, kg.
    pub mass: f64,
    /// Center-of-gravity offset from the body origin, m.
    pub cog_offset: [f64; 3],
    /// Inertia matrix about the body origin, kg m^2 (row-major 3x3).
    pub inertia: [[f64; 3]; 3],
    /// Added-mass matrix, kg and kg m^2 (row-major 6x6, twist order).
    pub added_mass: [[f64; 6]; 6],
    /// Linear damping derivatives, N s/m and N m s/rad (negative = dissipative).
    pub linear_damping: [f64; 6],
    /// Quadratic damping derivatives, N s^2/m^2 etc. (negative = dissipative).
    pub quadratic_damping: [f64; 6],
    /// Lateral lever arm of each propeller from the centerline, m.
    pub thruster_lever_arm: f64,
    /// Reverse thrust limit per propeller, N (negative).
    pub thrust_min: f64,
    /// Forward thrust limit per propeller, N.
    pub thrust_max: f64,
}

impl VesselParams {
    /// Rigid-body mass matrix in twist order,
    /// `[I, m*hat(r_g); m*hat(r_g)^T, m I]`.
    pub fn rigid_body_mass(&self) -> Matrix6<f64> {
        let rg = Vector3::from_row_slice(&self.cog_offset);
        let inertia = Matrix3::from_fn(|i, j| self.inertia[i][j]);
        let mg = hat3(&rg) * self.mass;
        let mut m = Matrix6::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&inertia);
        m.fixed_view_mut::<3, 3>(0, 3).copy_from(&mg);
        m.fixed_view_mut::<3, 3>(3, 0).copy_from(&mg.transpose());
        m.fixed_view_mut::<3, 3>(3, 3)
            .copy_from(&(Matrix3::identity() * self.mass));
        m
    }

    pub fn added_mass_matrix(&self) -> Matrix6<f64> {
        Matrix6::from_fn(|i, j| self.added_mass[i][j])
    }

    /// Combined mass matrix `M = M_RB + M_AM`.
    pub fn combined_mass(&self) -> Matrix6<f64> {
        self.rigid_body_mass() + self.added_mass_matrix()
    }

    pub fn load_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("vessel params serialize")
    }
}

/// Full kinematic and dynamic state of the plant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantState {
    pub pose: Pose,
    pub twist: Twist,
    /// Simulation time, s.
    pub time: f64,
}

impl PlantState {
    pub fn at_rest() -> Self {
        PlantState {
            pose: Pose::identity(),
            twist: Twist::zero(),
            time: 0.0,
        }
    }
}

/// External disturbance acting on the plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DisturbanceSpec {
    #[default]
    None,
    /// Constant wrench `[moment; force]` expressed in the world frame.
    ConstantWorldWrench { wrench: [f64; 6] },
    /// Quadratic drag from a uniform wind field: force
    /// `gain * |v_rel| * v_rel` at the center of mass, zero moment.
    WindField {
        /// Wind velocity in the world frame, m/s.
        velocity: [f64; 3],
        /// Drag gain, N s^2/m^2. Must be >= 0.
        gain: f64,
    },
    /// Per-axis body-frame wrench `a * sin(2 pi f t + phi)`.
    SinusoidalWrench {
        amplitude: [f64; 6],
        /// Frequencies in Hz. Must be >= 0.
        frequency: [f64; 6],
        phase: [f64; 6],
    },
    /// Steady ocean current; affects damping through the relative twist
    /// `xi_r = xi - xi_c` and produces no direct wrench.
    Current { twist: [f64; 6] },
}

impl DisturbanceSpec {
    /// Ocean-current twist, zero for all non-current kinds.
    pub fn current_twist(&self) -> Twist {
        match self {
            DisturbanceSpec::Current { twist } => Twist::from_vector(&Vector6::from_row_slice(twist)),
            _ => Twist::zero(),
        }
    }
}

/// Coriolis/centripetal wrench `ad_xi^T M xi`; power-neutral by construction.
pub fn coriolis_wrench(params: &VesselParams, xi: &Twist) -> Vector6<f64> {
    let m = params.combined_mass();
    adjoint_small(xi).transpose() * (m * xi.as_vector())
}

/// Damping matrix `D(xi_r) = -diag(lin) - diag(quad .* |xi_r|)`.
///
/// With coefficients stored as negative hydrodynamic derivatives the
/// diagonal is non-negative and `-D(xi_r) xi_r` opposes motion.
pub fn damping_matrix(params: &VesselParams, xi_r: &Twist) -> Matrix6<f64> {
    let v = xi_r.as_vector();
    let mut d = Matrix6::zeros();
    for i in 0..6 {
        d[(i, i)] = -params.linear_damping[i] - params.quadratic_damping[i] * v[i].abs();
    }
    d
}

/// Body-frame wrench `[moment; force]` produced by a disturbance at the
/// given state. World-specified disturbances are rotated into the body
/// frame by `blockdiag(R^T, R^T)`.
pub fn disturbance_body_wrench(dist: &DisturbanceSpec, state: &PlantState) -> Vector6<f64> {
    match dist {
        DisturbanceSpec::None | DisturbanceSpec::Current { .. } => Vector6::zeros(),
        DisturbanceSpec::ConstantWorldWrench { wrench } => {
            let w = Vector6::from_row_slice(wrench);
            rotate_wrench_to_body(&state.pose.rotation, &w)
        }
        DisturbanceSpec::WindField { velocity, gain } => {
            let wind = Vector3::from_row_slice(velocity);
            let vessel_vel_world = state.pose.rotation.rotate(&state.twist.linear);
            let v_rel = wind - vessel_vel_world;
            let force_world = v_rel * (gain * v_rel.norm());
            let force_body = state.pose.rotation.transpose().rotate(&force_world);
            let mut w = Vector6::zeros();
            w.fixed_rows_mut::<3>(3).copy_from(&force_body);
            w
        }
        DisturbanceSpec::SinusoidalWrench {
            amplitude,
            frequency,
            phase,
        } => Vector6::from_fn(|i, _| {
            amplitude[i] * (2.0 * std::f64::consts::PI * frequency[i] * state.time + phase[i]).sin()
        }),
    }
}

fn rotate_wrench_to_body(r: &Rotation, world_wrench: &Vector6<f64>) -> Vector6<f64> {
    let rt = r.transpose();
    let moment: Vector3<f64> = world_wrench.fixed_rows::<3>(0).into();
    let force: Vector3<f64> = world_wrench.fixed_rows::<3>(3).into();
    let mut w = Vector6::zeros();
    w.fixed_rows_mut::<3>(0).copy_from(&rt.rotate(&moment));
    w.fixed_rows_mut::<3>(3).copy_from(&rt.rotate(&force));
    w
}

/// Validated vessel model with the combined mass matrix and its inverse
/// cached for the integration loop.
#[derive(Debug, Clone)]
pub struct VesselModel {
    pub params: VesselParams,
    mass: Matrix6<f64>,
    mass_inv: Matrix6<f64>,
}

impl VesselModel {
    pub fn new(params: VesselParams) -> Result<Self, DynamicsError> {
        let mass = params.combined_mass();
        if (mass - mass.transpose()).norm() > 1e-9 * mass.norm().max(1.0) {
            return Err(DynamicsError::MassNotSpd);
        }
        let sym = nalgebra::SymmetricEigen::new(mass);
        let min = sym.eigenvalues.min();
        let max = sym.eigenvalues.max();
        if min <= 0.0 {
            return Err(DynamicsError::MassNotSpd);
        }
        let cond = max / min;
        if cond > 1e12 {
            return Err(DynamicsError::SingularMass { cond });
        }
        let mass_inv = mass.try_inverse().ok_or(DynamicsError::SingularMass { cond })?;
        Ok(VesselModel {
            params,
            mass,
            mass_inv,
        })
    }

    pub fn mass_matrix(&self) -> &Matrix6<f64> {
        &self.mass
    }

    pub fn mass_inverse(&self) -> &Matrix6<f64> {
        &self.mass_inv
    }

    /// Momentum balance: `M xi_dot = ad_xi^T M xi - D(xi_r) xi_r + tau + tau_dist`.
    /// Neutral buoyancy is assumed, so no hydrostatic term appears.
    pub fn twist_rate(&self, state: &PlantState, tau: &Vector6<f64>, dist: &DisturbanceSpec) -> Twist {
        let xi = state.twist.as_vector();
        let xi_r = (state.twist - dist.current_twist()).as_vector();
        let coriolis = adjoint_small(&state.twist).transpose() * (self.mass * xi);
        let damping = damping_matrix(&self.params, &Twist::from_vector(&xi_r)) * xi_r;
        let tau_d = disturbance_body_wrench(dist, state);
        Twist::from_vector(&(self.mass_inv * (coriolis - damping + tau + tau_d)))
    }

    /// Continuous dynamics: pose rate `X_dot = X hat6(xi)` and the twist rate.
    pub fn continuous_dynamics(
        &self,
        state: &PlantState,
        tau: &Vector6<f64>,
        dist: &DisturbanceSpec,
    ) -> (Matrix4<f64>, Twist) {
        let pose_rate = state.pose.homogeneous() * hat6(&state.twist);
        (pose_rate, self.twist_rate(state, tau, dist))
    }

    /// One RK4 step of the coupled pose/twist dynamics with the input wrench
    /// held constant. The rotation is re-orthonormalized after the step.
    pub fn step(
        &self,
        state: &PlantState,
        tau: &Vector6<f64>,
        dist: &DisturbanceSpec,
        dt: f64,
    ) -> PlantState {
        debug_assert!(dt > 0.0);
        let eval = |pose_h: &Matrix4<f64>, twist: &Twist, t: f64| {
            let s = PlantState {
                pose: pose_from_homogeneous(pose_h),
                twist: *twist,
                time: t,
            };
            (pose_h * hat6(twist), self.twist_rate(&s, tau, dist))
        };

        let x0 = state.pose.homogeneous();
        let v0 = state.twist;
        let t0 = state.time;

        let (k1x, k1v) = eval(&x0, &v0, t0);
        let (k2x, k2v) = eval(
            &(x0 + k1x * (dt / 2.0)),
            &(v0 + k1v.scale(dt / 2.0)),
            t0 + dt / 2.0,
        );
        let (k3x, k3v) = eval(
            &(x0 + k2x * (dt / 2.0)),
            &(v0 + k2v.scale(dt / 2.0)),
            t0 + dt / 2.0,
        );
        let (k4x, k4v) = eval(&(x0 + k3x * dt), &(v0 + k3v.scale(dt)), t0 + dt);

        let xh = x0 + (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (dt / 6.0);
        let twist = v0 + (k1v + k2v.scale(2.0) + k3v.scale(2.0) + k4v).scale(dt / 6.0);

        let pose = pose_from_homogeneous(&xh);
        PlantState {
            pose: Pose {
                rotation: pose.rotation.orthonormalize(),
                position: pose.position,
            },
            twist,
            time: t0 + dt,
        }
    }

    /// Kinetic energy `0.5 xi^T M xi`.
    pub fn kinetic_energy(&self, twist: &Twist) -> f64 {
        let v = twist.as_vector();
        0.5 * (v.transpose() * self.mass * v)[0]
    }
}

fn pose_from_homogeneous(m: &Matrix4<f64>) -> Pose {
    Pose {
        rotation: Rotation::from_matrix_unchecked(m.fixed_view::<3, 3>(0, 0).into()),
        position: m.fixed_view::<3, 1>(0, 3).into(),
    }
}

/// Parameters loosely modeled on a ~28 kg twin-propeller catamaran; used
/// as the default plant everywhere and mirrored by the checked-in vessel
/// file.
pub fn default_vessel_params() -> VesselParams {
    VesselParams {
        mass: 28.0,
        cog_offset: [0.0, 0.0, 0.0],
        inertia: [[1.8, 0.0, 0.0], [0.0, 4.5, 0.0], [0.0, 0.0, 5.5]],
        added_mass: [
            [0.9, 0.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 2.2, 0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 2.8, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 5.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0, 18.0, 0.0],
            [0.0, 0.0, 0.0, 0.0, 0.0, 22.0],
        ],
        linear_damping: [-1.2, -3.0, -4.2, -6.0, -35.0, -60.0],
        quadratic_damping: [-0.6, -1.5, -2.4, -8.0, -60.0, -80.0],
        thruster_lever_arm: 0.3,
        thrust_min: -26.0,
        thrust_max: 50.0,
    }
}
