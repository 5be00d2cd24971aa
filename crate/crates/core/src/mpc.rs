//! Convex error-state MPC in the Lie algebra.
//!
//! The controller state is `x = [psi; xi]` where `psi = log(X_d^-1 X)` is
//! the left-invariant pose error and `xi` the body twist. Around the
//! reference twist the hydrodynamic wrench is linearized analytically,
//! giving time-varying continuous-time matrices
//!
//! ```text
//!   A = [ -ad_{xi_d}  I      ]    B = [ 0        ]    h = [ -xi_d    ]
//!       [ 0           M^-1 H ]        [ M^-1 T   ]        [ M^-1 b   ]
//! ```
//!
//! with `T` the two-propeller thrust map. Discretization is first-order
//! (`A_k = I + A dt`, `B_k = B dt`, `h_k = h dt`), residual forecasts enter
//! the same way, and the horizon is condensed into a dense box-constrained
//! QP over the propeller thrusts.

use nalgebra::{DMatrix, DVector, Matrix6, SMatrix, SVector, Vector2, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::dare::DareError;
use crate::lie::{adjoint_small, exp_se3, hat3, log_se3, LieError, Pose, Twist};
use crate::qp::{QpSolver, QpStatus, QuadraticProgram, WarmStart};
use crate::vessel::{damping_matrix, VesselModel};

/// Dimension of the error state `[psi; xi]`.
pub const STATE_DIM: usize = 12;
/// Number of propellers / decision inputs per step.
pub const INPUT_DIM: usize = 2;

pub type StateVector = SVector<f64, STATE_DIM>;
pub type StateMatrix = SMatrix<f64, STATE_DIM, STATE_DIM>;
pub type InputMatrix = SMatrix<f64, STATE_DIM, INPUT_DIM>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MpcError {
    #[error(transparent)]
    Lie(#[from] LieError),
    #[error("terminal weight tuning failed: {0}")]
    Tuning(#[from] DareError),
    #[error("reference trajectory is empty")]
    EmptyTrajectory,
}

/// Sampled reference: poses and twists at the control period.
#[derive(Debug, Clone)]
pub struct ReferenceTrajectory {
    pub poses: Vec<Pose>,
    pub twists: Vec<Twist>,
    /// Sampling period, s.
    pub dt: f64,
}

impl ReferenceTrajectory {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 * self.dt
    }

    /// Reference at step `k`; past the end the trajectory clamps to the
    /// final pose with zero twist.
    pub fn sample(&self, k: usize) -> (Pose, Twist) {
        if k < self.len() {
            (self.poses[k], self.twists[k])
        } else {
            (*self.poses.last().expect("non-empty trajectory"), Twist::zero())
        }
    }

    /// Largest mismatch between stored twists and pose increments,
    /// `max_k |log(X_k^-1 X_{k+1}) - xi_k dt|`. Generation-side check.
    pub fn max_consistency_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..self.len().saturating_sub(1) {
            let inc = log_se3(&(self.poses[k].inverse() * self.poses[k + 1]))
                .expect("reference step below pi");
            let err = (inc.as_vector() - self.twists[k].as_vector() * self.dt).norm();
            worst = worst.max(err);
        }
        worst
    }
}

/// Error state `x = [psi; xi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorState {
    /// Lie-algebra pose error `log(X_d^-1 X)`.
    pub psi: Vector6<f64>,
    /// Body twist.
    pub xi: Twist,
}

impl ErrorState {
    pub fn as_vector(&self) -> StateVector {
        let mut v = StateVector::zeros();
        v.fixed_rows_mut::<6>(0).copy_from(&self.psi);
        v.fixed_rows_mut::<6>(6).copy_from(&self.xi.as_vector());
        v
    }
}

/// Left-invariant error state of a measurement against a reference pose.
pub fn error_state(pose: &Pose, reference: &Pose, twist: &Twist) -> Result<ErrorState, LieError> {
    let psi = log_se3(&(reference.inverse() * *pose))?;
    Ok(ErrorState {
        psi: psi.as_vector(),
        xi: *twist,
    })
}

/// Analytic linearization of the hydrodynamic wrench
/// `f(xi) = ad_xi^T M xi - D(xi) xi` about `xi_d`.
///
/// Returns `(H, b)` with `H = df/dxi|_{xi_d}` and `b = f(xi_d) - H xi_d`,
/// so `H xi + b` matches `f` to first order at the operating point.
pub fn linearize_hydro(model: &VesselModel, xi_d: &Twist) -> (Matrix6<f64>, Vector6<f64>) {
    let m = model.mass_matrix();
    let xi_v = xi_d.as_vector();
    let mu = m * xi_v;
    let mu_w: nalgebra::Vector3<f64> = mu.fixed_rows::<3>(0).into();
    let mu_v: nalgebra::Vector3<f64> = mu.fixed_rows::<3>(3).into();

    // d(ad_xi^T M xi)/dxi = K(M xi) + ad_xi^T M, where K(mu) e = ad_e^T mu.
    let mut k = Matrix6::zeros();
    k.fixed_view_mut::<3, 3>(0, 0).copy_from(&hat3(&mu_w));
    k.fixed_view_mut::<3, 3>(0, 3).copy_from(&hat3(&mu_v));
    k.fixed_view_mut::<3, 3>(3, 0).copy_from(&hat3(&mu_v));
    let mut h = k + adjoint_small(xi_d).transpose() * m;

    // d(-D(xi) xi)/dxi is diagonal: lin_i + 2 quad_i |xi_i|.
    for i in 0..6 {
        h[(i, i)] += model.params.linear_damping[i]
            + 2.0 * model.params.quadratic_damping[i] * xi_v[i].abs();
    }

    let f = adjoint_small(xi_d).transpose() * mu - damping_matrix(&model.params, xi_d) * xi_v;
    let b = f - h * xi_v;
    (h, b)
}

/// Continuous-time linearized dynamics at one horizon step.
#[derive(Debug, Clone, Copy)]
pub struct ContinuousModel {
    pub a: StateMatrix,
    pub b: InputMatrix,
    pub h: StateVector,
}

/// One horizon step: continuous and discretized matrices plus the output map.
#[derive(Debug, Clone, Copy)]
pub struct HorizonStep {
    pub cont: ContinuousModel,
    pub a_disc: StateMatrix,
    pub b_disc: InputMatrix,
    pub h_disc: StateVector,
    /// Output map `y = G x - d` with `d = [0; xi_d]`.
    pub g_out: StateMatrix,
    pub xi_d: Twist,
}

/// Linearized horizon produced by [`build_horizon`].
#[derive(Debug, Clone)]
pub struct LinearizedModel {
    /// Steps 0..=N (the terminal entry only contributes its output map).
    pub steps: Vec<HorizonStep>,
    pub dt: f64,
}

/// Terminal-weight policy for the condensed cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TerminalWeight {
    /// Diagonal weight applied to the terminal output.
    Diag { weights: [f64; STATE_DIM] },
    /// Solve a DARE on the planar subsystem at a straight-line operating
    /// point and use the resulting cost-to-go.
    Dare { cruise_speed: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig {
    /// Horizon length N, steps.
    pub horizon: usize,
    /// Control period, s.
    pub dt: f64,
    /// Diagonal stage weight on the output `y = [psi; psi_dot]`.
    pub q_diag: [f64; STATE_DIM],
    /// Diagonal input weight on the two thrusts.
    pub r_diag: [f64; INPUT_DIM],
    pub terminal: TerminalWeight,
    /// Consecutive solver faults tolerated before commanding zero thrust.
    pub fault_hold_limit: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon: 30,
            dt: 0.02,
            // The propellers cannot act on heave, roll, or pitch, so those
            // output components carry no weight.
            q_diag: [
                0.0, 0.0, 6.0, 40.0, 40.0, 0.0, // psi
                0.0, 0.0, 1.0, 4.0, 4.0, 0.0, // psi_dot
            ],
            r_diag: [2e-3, 2e-3],
            terminal: TerminalWeight::Dare { cruise_speed: 0.5 },
            fault_hold_limit: 5,
        }
    }
}

/// Wrench produced by unit thrust on each propeller: surge force plus yaw
/// moment about the lever arm, columns ordered (left, right).
pub fn thrust_map(lever_arm: f64) -> SMatrix<f64, 6, INPUT_DIM> {
    let mut t = SMatrix::<f64, 6, INPUT_DIM>::zeros();
    t[(2, 0)] = -lever_arm;
    t[(2, 1)] = lever_arm;
    t[(3, 0)] = 1.0;
    t[(3, 1)] = 1.0;
    t
}

/// Build the continuous model at one reference sample.
pub fn continuous_model(
    model: &VesselModel,
    t_map: &SMatrix<f64, 6, INPUT_DIM>,
    xi_d: &Twist,
) -> ContinuousModel {
    let (h_jac, b_res) = linearize_hydro(model, xi_d);
    let m_inv = model.mass_inverse();
    let mut a = StateMatrix::zeros();
    a.fixed_view_mut::<6, 6>(0, 0)
        .copy_from(&(-adjoint_small(xi_d)));
    a.fixed_view_mut::<6, 6>(0, 6).copy_from(&Matrix6::identity());
    a.fixed_view_mut::<6, 6>(6, 6).copy_from(&(m_inv * h_jac));

    let mut b = InputMatrix::zeros();
    b.fixed_view_mut::<6, 2>(6, 0).copy_from(&(m_inv * t_map));

    let mut h = StateVector::zeros();
    h.fixed_rows_mut::<6>(0).copy_from(&(-xi_d.as_vector()));
    h.fixed_rows_mut::<6>(6).copy_from(&(m_inv * b_res));

    ContinuousModel { a, b, h }
}

/// Output map `G` of `y = G x - [0; xi_d]` at one reference twist.
pub fn output_map(xi_d: &Twist) -> StateMatrix {
    let mut g = StateMatrix::identity();
    g.fixed_view_mut::<6, 6>(6, 0)
        .copy_from(&(-adjoint_small(xi_d)));
    g
}

/// Condensed QP over the stacked thrusts, along with the linearized model
/// and the constant cost term dropped from the QP objective.
pub struct CondensedProblem {
    pub model: LinearizedModel,
    pub qp: QuadraticProgram,
    /// Constant part of the cost, so `J = 0.5 u'Hu + g'u + cost_offset`.
    pub cost_offset: f64,
}

/// Assemble the linearized horizon and the condensed QP.
///
/// `forecast` holds residual forecasts for steps `0..N` in state-rate
/// units; they are scaled by `dt` exactly like the nominal drift term. An
/// empty slice means a zero forecast.
pub fn build_horizon(
    model: &VesselModel,
    config: &MpcConfig,
    terminal: &ResolvedTerminal,
    traj: &ReferenceTrajectory,
    k0: usize,
    x0: &StateVector,
    forecast: &[StateVector],
) -> CondensedProblem {
    let n = config.horizon;
    let dt = config.dt;
    let nu = INPUT_DIM * n;
    let t_map = thrust_map(model.params.thruster_lever_arm);

    let mut steps = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let (_, xi_d) = traj.sample(k0 + k);
        let cont = continuous_model(model, &t_map, &xi_d);
        steps.push(HorizonStep {
            cont,
            a_disc: StateMatrix::identity() + cont.a * dt,
            b_disc: cont.b * dt,
            h_disc: cont.h * dt,
            g_out: output_map(&xi_d),
            xi_d,
        });
    }

    let q = config.q_diag;
    let r = &config.r_diag;

    let mut hess = DMatrix::<f64>::zeros(nu, nu);
    let mut grad = DVector::<f64>::zeros(nu);
    let mut cost_offset = 0.0;

    // Sensitivity of x_k to the stacked inputs (columns beyond 2k are zero)
    // and its affine part.
    let mut e = DMatrix::<f64>::zeros(STATE_DIM, nu);
    let mut c = *x0;

    for k in 0..n {
        let step = &steps[k];
        let h_tilde = forecast.get(k).copied().unwrap_or_else(StateVector::zeros);

        // x_{k+1} = A_k x_k + B_k u_k + (h_k + h~_k dt)
        let active = INPUT_DIM * k;
        let e_prev = e.columns(0, active).into_owned();
        e.columns_mut(0, active).copy_from(&(step.a_disc * e_prev));
        e.fixed_view_mut::<STATE_DIM, INPUT_DIM>(0, active)
            .copy_from(&step.b_disc);
        c = step.a_disc * c + step.h_disc + h_tilde * dt;

        // Output at index k+1.
        let out = &steps[k + 1];
        let cols = INPUT_DIM * (k + 1);
        let w = out.g_out * e.columns(0, cols);
        let mut y0 = out.g_out * c;
        for i in 0..6 {
            y0[6 + i] -= out.xi_d.as_vector()[i];
        }

        // Stage weight Q for 1..N-1, terminal weight P at N.
        if k + 1 < n {
            let mut qw = w.clone_owned();
            for i in 0..STATE_DIM {
                qw.row_mut(i).scale_mut(q[i]);
            }
            let block = w.transpose() * &qw * 2.0;
            hess.view_mut((0, 0), (cols, cols)).add_assign(&block);
            let qy0 = StateVector::from_fn(|i, _| q[i] * y0[i]);
            let gblock = w.transpose() * qy0 * 2.0;
            grad.rows_mut(0, cols).add_assign(&gblock);
            cost_offset += y0.dot(&qy0);
        } else {
            let p_y = terminal.output_weight(&out.xi_d);
            let pw = p_y * &w;
            let block = w.transpose() * &pw * 2.0;
            hess.view_mut((0, 0), (cols, cols)).add_assign(&block);
            let py0 = p_y * y0;
            let gblock = w.transpose() * py0 * 2.0;
            grad.rows_mut(0, cols).add_assign(&gblock);
            cost_offset += y0.dot(&py0);
        }
    }

    for k in 0..n {
        for j in 0..INPUT_DIM {
            hess[(INPUT_DIM * k + j, INPUT_DIM * k + j)] += 2.0 * r[j];
        }
    }

    // Exact symmetry for the solver's validation.
    let hess = (&hess + hess.transpose()) * 0.5;

    let qp = QuadraticProgram {
        hessian: hess,
        gradient: grad,
        constraints: DMatrix::identity(nu, nu),
        lower: DVector::from_element(nu, model.params.thrust_min),
        upper: DVector::from_element(nu, model.params.thrust_max),
    };

    CondensedProblem {
        model: LinearizedModel { steps, dt },
        qp,
        cost_offset,
    }
}

/// Planar sub-state indices inside the 12-D error state:
/// yaw error, x/y position error, yaw rate, surge, sway.
pub const PLANAR_INDICES: [usize; 6] = [2, 3, 4, 8, 9, 10];

/// Embed a 6x6 planar matrix back into the 12-D state ordering.
pub fn embed_planar(p6: &Matrix6<f64>) -> StateMatrix {
    let mut p = StateMatrix::zeros();
    for (i, &gi) in PLANAR_INDICES.iter().enumerate() {
        for (j, &gj) in PLANAR_INDICES.iter().enumerate() {
            p[(gi, gj)] = p6[(i, j)];
        }
    }
    p
}

/// Terminal weight after resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResolvedTerminal {
    /// Applied directly to the terminal output `y_N`.
    Output(StateMatrix),
    /// Cost-to-go in deviation-state coordinates `(psi, xi - xi_d)`,
    /// re-expressed through the terminal output map each cycle.
    CostToGo(StateMatrix),
}

impl ResolvedTerminal {
    /// Weight on `y_N` at the given terminal reference twist.
    ///
    /// `y = G x - d` with `G^{-1} d = d`, so `y' Py y = (x - d)' Px (x - d)`
    /// for `Py = G^{-T} Px G^{-1}` and `G^{-1} = [I 0; ad_{xi_d} I]`.
    pub fn output_weight(&self, xi_d: &Twist) -> StateMatrix {
        match self {
            ResolvedTerminal::Output(p) => *p,
            ResolvedTerminal::CostToGo(px) => {
                let mut g_inv = StateMatrix::identity();
                g_inv
                    .fixed_view_mut::<6, 6>(6, 0)
                    .copy_from(&adjoint_small(xi_d));
                g_inv.transpose() * px * g_inv
            }
        }
    }
}

/// Resolve the terminal weight policy.
///
/// For [`TerminalWeight::Dare`] the cost-to-go is computed on the planar
/// subsystem at a straight-line cruise reference; the remaining axes get no
/// terminal weight because the propellers cannot act on them.
pub fn resolve_terminal_weight(
    model: &VesselModel,
    config: &MpcConfig,
) -> Result<ResolvedTerminal, MpcError> {
    match &config.terminal {
        TerminalWeight::Diag { weights } => {
            let mut p = StateMatrix::zeros();
            for i in 0..STATE_DIM {
                p[(i, i)] = weights[i];
            }
            Ok(ResolvedTerminal::Output(p))
        }
        TerminalWeight::Dare { cruise_speed } => {
            let tuning = crate::baselines::tuning::tune_planar(model, config, *cruise_speed)?;
            Ok(ResolvedTerminal::CostToGo(embed_planar(&tuning.p)))
        }
    }
}

/// Per-cycle controller diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct CycleDiagnostics {
    /// Full MPC cost at the returned input sequence.
    pub cost: f64,
    pub qp_status: QpStatus,
    pub qp_iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Any propeller command hit its bound.
    pub saturated: bool,
    /// This cycle fell back to fault-hold.
    pub fault: bool,
}

/// Output of one control cycle.
#[derive(Debug, Clone)]
pub struct ControlOutput {
    /// Realized body wrench after clipping, `T u`.
    pub wrench: Vector6<f64>,
    /// Propeller thrusts (left, right), N.
    pub commands: Vector2<f64>,
    pub diagnostics: CycleDiagnostics,
}

/// Error-state MPC controller for one vessel.
pub struct LieMpcController {
    pub config: MpcConfig,
    model: VesselModel,
    terminal_p: ResolvedTerminal,
    solver: QpSolver,
    warm: Option<WarmStart>,
    prev_commands: Vector2<f64>,
    fault_streak: usize,
    /// Predicted (pose, twist) for absolute steps `k0..=k0+N` of the last
    /// successful cycle; consumed by the learner one cycle later.
    predicted: Vec<(Pose, Twist)>,
    predicted_from: usize,
    /// Continuous model at the executed step of the last cycle.
    last_executed_model: Option<ContinuousModel>,
}

impl LieMpcController {
    pub fn new(model: VesselModel, config: MpcConfig) -> Result<Self, MpcError> {
        let terminal_p = resolve_terminal_weight(&model, &config)?;
        Ok(LieMpcController {
            config,
            model,
            terminal_p,
            solver: QpSolver::default(),
            warm: None,
            prev_commands: Vector2::zeros(),
            fault_streak: 0,
            predicted: Vec::new(),
            predicted_from: 0,
            last_executed_model: None,
        })
    }

    pub fn vessel(&self) -> &VesselModel {
        &self.model
    }

    pub fn terminal_weight(&self) -> &ResolvedTerminal {
        &self.terminal_p
    }

    /// Predicted states from the last cycle and the step they start at.
    pub fn predicted_states(&self) -> (usize, &[(Pose, Twist)]) {
        (self.predicted_from, &self.predicted)
    }

    /// Continuous linearization at the last executed step, for residual
    /// measurement.
    pub fn last_executed_model(&self) -> Option<&ContinuousModel> {
        self.last_executed_model.as_ref()
    }

    fn clip(&self, u: f64) -> f64 {
        u.clamp(self.model.params.thrust_min, self.model.params.thrust_max)
    }

    fn fault_output(&mut self, status: QpStatus) -> ControlOutput {
        self.fault_streak += 1;
        let commands = if self.fault_streak > self.config.fault_hold_limit {
            Vector2::zeros()
        } else {
            self.prev_commands
        };
        let t_map = thrust_map(self.model.params.thruster_lever_arm);
        ControlOutput {
            wrench: t_map * commands,
            commands,
            diagnostics: CycleDiagnostics {
                cost: f64::NAN,
                qp_status: status,
                qp_iterations: 0,
                primal_residual: f64::NAN,
                dual_residual: f64::NAN,
                saturated: false,
                fault: true,
            },
        }
    }

    /// One control cycle: build the horizon at reference step `k0`, solve,
    /// and return the first input. Never panics the loop; solver failures
    /// fall back to holding the previous command.
    pub fn control_step(
        &mut self,
        k0: usize,
        measurement: &crate::vessel::PlantState,
        traj: &ReferenceTrajectory,
        forecast: &[StateVector],
    ) -> ControlOutput {
        let (ref_pose, _) = traj.sample(k0);
        let x0 = match error_state(&measurement.pose, &ref_pose, &measurement.twist) {
            Ok(es) => es.as_vector(),
            Err(_) => return self.fault_output(QpStatus::MaxIterations),
        };

        let problem = build_horizon(
            &self.model,
            &self.config,
            &self.terminal_p,
            traj,
            k0,
            &x0,
            forecast,
        );

        let solution = match self.solver.solve(&problem.qp, self.warm.as_ref()) {
            Ok(s) => s,
            Err(_) => return self.fault_output(QpStatus::MaxIterations),
        };
        if solution.status != QpStatus::Solved {
            return self.fault_output(solution.status);
        }
        self.fault_streak = 0;

        // Warm start for the next cycle: shift the plan by one step.
        let nu = solution.primal.len();
        let mut warm_primal = DVector::zeros(nu);
        let mut warm_dual = DVector::zeros(nu);
        warm_primal
            .rows_mut(0, nu - INPUT_DIM)
            .copy_from(&solution.primal.rows(INPUT_DIM, nu - INPUT_DIM));
        warm_primal
            .rows_mut(nu - INPUT_DIM, INPUT_DIM)
            .copy_from(&solution.primal.rows(nu - INPUT_DIM, INPUT_DIM));
        warm_dual
            .rows_mut(0, nu - INPUT_DIM)
            .copy_from(&solution.dual.rows(INPUT_DIM, nu - INPUT_DIM));
        warm_dual
            .rows_mut(nu - INPUT_DIM, INPUT_DIM)
            .copy_from(&solution.dual.rows(nu - INPUT_DIM, INPUT_DIM));

        // Saturation contract: clip, then recompute the wrench.
        let raw = Vector2::new(solution.primal[0], solution.primal[1]);
        let commands = Vector2::new(self.clip(raw[0]), self.clip(raw[1]));
        let saturated = commands.iter().any(|&u| {
            u <= self.model.params.thrust_min + 1e-9 || u >= self.model.params.thrust_max - 1e-9
        });
        let t_map = thrust_map(self.model.params.thruster_lever_arm);
        let wrench = t_map * commands;

        let cost = 0.5 * (solution.primal.transpose() * &problem.qp.hessian * &solution.primal)[0]
            + problem.qp.gradient.dot(&solution.primal)
            + problem.cost_offset;

        // Roll the optimal plan forward to cache predicted states for the
        // learner's horizon inputs next cycle.
        self.predicted.clear();
        let n = self.config.horizon;
        let mut x = x0;
        for k in 0..=n {
            let (pd, _) = traj.sample(k0 + k);
            let psi = Twist::from_vector(&x.fixed_rows::<6>(0).into());
            let xi = Twist::from_vector(&x.fixed_rows::<6>(6).into());
            self.predicted.push((pd * exp_se3(&psi), xi));
            if k < n {
                let step = &problem.model.steps[k];
                let uk = Vector2::new(
                    solution.primal[INPUT_DIM * k],
                    solution.primal[INPUT_DIM * k + 1],
                );
                let h_tilde = forecast.get(k).copied().unwrap_or_else(StateVector::zeros);
                x = step.a_disc * x + step.b_disc * uk + step.h_disc + h_tilde * self.config.dt;
            }
        }
        self.predicted_from = k0;
        self.last_executed_model = Some(problem.model.steps[0].cont);
        self.warm = Some(WarmStart {
            primal: warm_primal,
            dual: warm_dual,
        });
        self.prev_commands = commands;

        ControlOutput {
            wrench,
            commands,
            diagnostics: CycleDiagnostics {
                cost,
                qp_status: solution.status,
                qp_iterations: solution.iterations,
                primal_residual: solution.primal_residual,
                dual_residual: solution.dual_residual,
                saturated,
                fault: false,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vessel::{default_vessel_params, PlantState};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> VesselModel {
        VesselModel::new(default_vessel_params()).unwrap()
    }

    fn straight_reference(speed: f64, steps: usize, dt: f64) -> ReferenceTrajectory {
        let twist = Twist::new(Vector3::zeros(), Vector3::new(speed, 0.0, 0.0));
        let mut poses = Vec::with_capacity(steps);
        let mut pose = Pose::identity();
        for _ in 0..steps {
            poses.push(pose);
            pose = pose * exp_se3(&twist.scale(dt));
        }
        ReferenceTrajectory {
            poses,
            twists: vec![twist; steps],
            dt,
        }
    }

    fn rest_reference(steps: usize, dt: f64) -> ReferenceTrajectory {
        ReferenceTrajectory {
            poses: vec![Pose::identity(); steps],
            twists: vec![Twist::zero(); steps],
            dt,
        }
    }

    fn random_twist(rng: &mut impl Rng) -> Twist {
        Twist::new(
            Vector3::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ),
            Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
        )
    }

    /// Matrix-logarithm power series, valid near the identity; the oracle
    /// for the error-state pose log.
    fn logm_series(m: &nalgebra::Matrix4<f64>, terms: usize) -> nalgebra::Matrix4<f64> {
        let x = m - nalgebra::Matrix4::identity();
        let mut acc = nalgebra::Matrix4::zeros();
        let mut pow = nalgebra::Matrix4::identity();
        for k in 1..=terms {
            pow *= x;
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            acc += pow * (sign / k as f64);
        }
        acc
    }

    #[test]
    fn error_state_zero_on_reference() {
        let p = exp_se3(&Twist::new(
            Vector3::new(0.1, 0.0, 0.4),
            Vector3::new(1.0, 2.0, 0.0),
        ));
        let es = error_state(&p, &p, &Twist::zero()).unwrap();
        assert!(es.psi.norm() < 1e-12);
    }

    #[test]
    fn error_state_matches_displacement() {
        let x_d = exp_se3(&Twist::new(
            Vector3::new(0.0, 0.0, 0.3),
            Vector3::new(2.0, -1.0, 0.0),
        ));
        let delta = Twist::new(Vector3::new(0.01, -0.02, 0.03), Vector3::new(0.1, 0.05, 0.0));
        let x = x_d * exp_se3(&delta);
        let es = error_state(&x, &x_d, &Twist::zero()).unwrap();
        assert!((es.psi - delta.as_vector()).norm() < 1e-12);
    }

    #[test]
    fn error_state_matches_series_log_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let x_d = exp_se3(&random_twist(&mut rng));
            let delta = random_twist(&mut rng).scale(0.05);
            let x = x_d * exp_se3(&delta);
            let rel = (x_d.inverse() * x).homogeneous();
            let oracle = crate::lie::vee6(&logm_series(&rel, 40));
            let es = error_state(&x, &x_d, &Twist::zero()).unwrap();
            assert!((es.psi - oracle.as_vector()).norm() < 1e-10);
        }
    }

    #[test]
    fn hydro_linearization_at_rest() {
        let m = model();
        let (h, b) = linearize_hydro(&m, &Twist::zero());
        for i in 0..6 {
            for j in 0..6 {
                let expected = if i == j { m.params.linear_damping[i] } else { 0.0 };
                assert!((h[(i, j)] - expected).abs() < 1e-12);
            }
        }
        assert!(b.norm() < 1e-12);
    }

    #[test]
    fn hydro_jacobian_matches_finite_differences() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let eps = 1e-6;
        let f = |xi: &Vector6<f64>| -> Vector6<f64> {
            let t = Twist::from_vector(xi);
            adjoint_small(&t).transpose() * (m.mass_matrix() * xi)
                - damping_matrix(&m.params, &t) * xi
        };
        for _ in 0..100 {
            let xi_d = random_twist(&mut rng);
            let (h, _) = linearize_hydro(&m, &xi_d);
            let x = xi_d.as_vector();
            let mut max_err: f64 = 0.0;
            for j in 0..6 {
                let mut dp = x;
                let mut dm = x;
                dp[j] += eps;
                dm[j] -= eps;
                let col = (f(&dp) - f(&dm)) / (2.0 * eps);
                for i in 0..6 {
                    max_err = max_err.max((h[(i, j)] - col[i]).abs());
                }
            }
            assert!(max_err <= 1e-5, "fd mismatch {max_err}");
        }
    }

    #[test]
    fn hydro_remainder_is_quadratic() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let f = |xi: &Vector6<f64>| -> Vector6<f64> {
            let t = Twist::from_vector(xi);
            adjoint_small(&t).transpose() * (m.mass_matrix() * xi)
                - damping_matrix(&m.params, &t) * xi
        };
        for _ in 0..20 {
            let xi_d = random_twist(&mut rng);
            let (h, b) = linearize_hydro(&m, &xi_d);
            let dirs: Vec<Vector6<f64>> = (0..12)
                .map(|_| {
                    let d = random_twist(&mut rng).as_vector();
                    d / d.norm()
                })
                .collect();
            let remainder = |delta: &Vector6<f64>| -> f64 {
                let xi = xi_d.as_vector() + delta;
                (f(&xi) - (h * xi + b)).norm()
            };
            // Fit the curvature constant at radius 0.1, then check smaller
            // radii stay quadratically bounded by it.
            let mut c_fit: f64 = 0.0;
            for d in &dirs {
                c_fit = c_fit.max(remainder(&(d * 0.1)) / 0.01);
            }
            for d in &dirs {
                for &r in &[0.05, 0.025] {
                    let rem = remainder(&(d * r));
                    assert!(
                        rem <= 1.5 * (c_fit + 1e-9) * r * r,
                        "remainder {rem} vs bound {} at radius {r}",
                        1.5 * c_fit * r * r
                    );
                }
            }
        }
    }

    #[test]
    fn discrete_matrices_constructed_exactly() {
        let m = model();
        let cfg = MpcConfig::default();
        let p = resolve_terminal_weight(&m, &cfg).unwrap();
        let traj = straight_reference(0.5, 100, cfg.dt);
        let built = build_horizon(&m, &cfg, &p, &traj, 0, &StateVector::zeros(), &[]);
        for step in &built.model.steps {
            assert_eq!(step.a_disc, StateMatrix::identity() + step.cont.a * cfg.dt);
            assert_eq!(step.b_disc, step.cont.b * cfg.dt);
            assert_eq!(step.h_disc, step.cont.h * cfg.dt);
        }
    }

    #[test]
    fn stationary_solution_cancels_drag() {
        let m = model();
        let cfg = MpcConfig::default();
        let p = resolve_terminal_weight(&m, &cfg).unwrap();
        let speed = 0.5;
        let traj = straight_reference(speed, 200, cfg.dt);
        let built = build_horizon(&m, &cfg, &p, &traj, 0, &StateVector::zeros(), &[]);
        let sol = QpSolver::default().solve(&built.qp, None).unwrap();
        assert_eq!(sol.status, QpStatus::Solved);
        // Drag at 0.5 m/s split across the propellers.
        let params = &m.params;
        let drag = -(params.linear_damping[3] + params.quadratic_damping[3] * speed) * speed;
        let per_prop = drag / 2.0;
        assert!(
            (sol.primal[0] - per_prop).abs() < 0.05 * per_prop.abs() + 1e-3,
            "thrust {} vs feedforward {}",
            sol.primal[0],
            per_prop
        );
        assert!((sol.primal[0] - sol.primal[1]).abs() < 1e-6);
    }

    #[test]
    fn reference_at_rest_needs_no_input() {
        let m = model();
        let cfg = MpcConfig::default();
        let p = resolve_terminal_weight(&m, &cfg).unwrap();
        let traj = rest_reference(100, cfg.dt);
        let built = build_horizon(&m, &cfg, &p, &traj, 0, &StateVector::zeros(), &[]);
        let sol = QpSolver::default().solve(&built.qp, None).unwrap();
        assert!(sol.primal.amax() < 1e-6);
    }

    #[test]
    fn one_step_horizon_matches_closed_form() {
        let m = model();
        let cfg = MpcConfig {
            horizon: 1,
            terminal: TerminalWeight::Diag {
                weights: [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5],
            },
            ..MpcConfig::default()
        };
        let p = resolve_terminal_weight(&m, &cfg).unwrap();
        let traj = straight_reference(0.5, 10, cfg.dt);
        let mut x0 = StateVector::zeros();
        x0[4] = 0.3; // lateral offset
        x0[2] = -0.1; // heading error
        let built = build_horizon(&m, &cfg, &p, &traj, 0, &x0, &[]);

        // Closed-form unconstrained minimizer of
        // (W u + y0)' P (W u + y0) + u' R u.
        let step0 = &built.model.steps[0];
        let step1 = &built.model.steps[1];
        let w = step1.g_out * step0.b_disc;
        let mut y0 = step1.g_out * (step0.a_disc * x0 + step0.h_disc);
        for i in 0..6 {
            y0[6 + i] -= step1.xi_d.as_vector()[i];
        }
        let p_y = p.output_weight(&step1.xi_d);
        let r = nalgebra::Matrix2::from_diagonal(&Vector2::from_row_slice(&cfg.r_diag));
        let hess = w.transpose() * p_y * w + r;
        let u_star = hess.try_inverse().unwrap() * (-(w.transpose() * p_y * y0));

        let sol = QpSolver::default().solve(&built.qp, None).unwrap();
        assert!(
            (Vector2::new(sol.primal[0], sol.primal[1]) - u_star).norm() < 1e-5,
            "qp {:?} oracle {:?}",
            sol.primal,
            u_star
        );
    }

    #[test]
    fn residual_injection_obeys_superposition() {
        let m = model();
        let cfg = MpcConfig::default();
        let p = resolve_terminal_weight(&m, &cfg).unwrap();
        let traj = straight_reference(0.5, 100, cfg.dt);
        let x0 = StateVector::zeros();

        let base = build_horizon(&m, &cfg, &p, &traj, 0, &x0, &[]);
        let mut resid = StateVector::zeros();
        resid[9] = 0.4; // surge acceleration residual
        let forecast = vec![resid; cfg.horizon];
        let shifted = build_horizon(&m, &cfg, &p, &traj, 0, &x0, &forecast);

        let sol_base = QpSolver::default().solve(&base.qp, None).unwrap();
        let sol_shift = QpSolver::default().solve(&shifted.qp, None).unwrap();

        // Unconstrained superposition: H du = -(g_shift - g_base).
        let dg = &shifted.qp.gradient - &base.qp.gradient;
        let chol = nalgebra::Cholesky::new(base.qp.hessian.clone()).unwrap();
        let du_pred = chol.solve(&(-&dg));
        let du = &sol_shift.primal - &sol_base.primal;
        assert!(
            (&du - &du_pred).amax() < 1e-4,
            "superposition gap {}",
            (&du - &du_pred).amax()
        );
        // Free surge acceleration means the controller backs off thrust.
        assert!(sol_shift.primal[0] < sol_base.primal[0]);
    }

    #[test]
    fn rolling_linear_model_tracks_reference_to_first_order() {
        // Roll (A_k, B_k, h_k) from x0 = 0 with per-step feedforward inputs
        // (zero deviation input); psi_N stays first-order small on a smooth
        // reference.
        let m = model();
        let cfg = MpcConfig::default();
        let p = resolve_terminal_weight(&m, &cfg).unwrap();
        let dt = cfg.dt;
        let steps = 200;
        let mut poses = Vec::new();
        let mut twists = Vec::new();
        let mut pose = Pose::identity();
        for k in 0..steps {
            let t = k as f64 * dt;
            let tw = Twist::new(
                Vector3::new(0.0, 0.0, 0.1 * (t / 100.0).cos()),
                Vector3::new(0.5, 0.0, 0.0),
            );
            poses.push(pose);
            twists.push(tw);
            pose = pose * exp_se3(&tw.scale(dt));
        }
        let traj = ReferenceTrajectory { poses, twists, dt };
        let built = build_horizon(&m, &cfg, &p, &traj, 0, &StateVector::zeros(), &[]);

        let t_map = thrust_map(m.params.thruster_lever_arm);
        let a2 = nalgebra::Matrix2::new(t_map[(2, 0)], t_map[(2, 1)], t_map[(3, 0)], t_map[(3, 1)]);
        let a2_inv = a2.try_inverse().unwrap();
        let mut x = StateVector::zeros();
        for k in 0..cfg.horizon {
            let step = &built.model.steps[k];
            let (h_jac, b_res) = linearize_hydro(&m, &step.xi_d);
            let wrench_needed = -(h_jac * step.xi_d.as_vector() + b_res);
            let u = a2_inv * Vector2::new(wrench_needed[2], wrench_needed[3]);
            x = step.a_disc * x + step.b_disc * u + step.h_disc;
        }
        let psi_n = x.fixed_rows::<6>(0).norm();
        assert!(psi_n <= 1e-3, "terminal psi {psi_n}");
    }

    #[test]
    fn cost_monotone_in_lateral_offset() {
        let m = model();
        let cfg = MpcConfig::default();
        let p = resolve_terminal_weight(&m, &cfg).unwrap();
        let traj = straight_reference(0.5, 100, cfg.dt);
        let mut solver = QpSolver::default();
        let mut costs = Vec::new();
        for &offset in &[0.25, 0.5, 1.0, 2.0] {
            let mut x0 = StateVector::zeros();
            x0[4] = offset;
            let built = build_horizon(&m, &cfg, &p, &traj, 0, &x0, &[]);
            let sol = solver.solve(&built.qp, None).unwrap();
            let cost = 0.5 * (sol.primal.transpose() * &built.qp.hessian * &sol.primal)[0]
                + built.qp.gradient.dot(&sol.primal)
                + built.cost_offset;
            costs.push(cost);
        }
        for w in costs.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "costs not monotone: {costs:?}");
        }
    }

    #[test]
    fn wrench_stays_in_thrust_span() {
        let t = thrust_map(0.3);
        // Only yaw moment and surge force are reachable by construction.
        for i in [0usize, 1, 4, 5] {
            assert_eq!(t.row(i).norm(), 0.0);
        }
        let m = model();
        let cfg = MpcConfig::default();
        let mut ctl = LieMpcController::new(m, cfg.clone()).unwrap();
        let traj = straight_reference(0.5, 200, cfg.dt);
        let meas = PlantState {
            pose: Pose::from_translation(Vector3::new(0.0, 1.0, 0.0)),
            twist: Twist::zero(),
            time: 0.0,
        };
        let out = ctl.control_step(0, &meas, &traj, &[]);
        for i in [0usize, 1, 4, 5] {
            assert_eq!(out.wrench[i], 0.0);
        }
    }

    #[test]
    fn on_reference_yields_feedforward_pair() {
        let m = model();
        let cfg = MpcConfig::default();
        let mut ctl = LieMpcController::new(m, cfg.clone()).unwrap();
        let speed = 0.5;
        let traj = straight_reference(speed, 400, cfg.dt);
        let meas = PlantState {
            pose: Pose::identity(),
            twist: Twist::new(Vector3::zeros(), Vector3::new(speed, 0.0, 0.0)),
            time: 0.0,
        };
        let out = ctl.control_step(0, &meas, &traj, &[]);
        let params = &ctl.vessel().params;
        let drag = -(params.linear_damping[3] + params.quadratic_damping[3] * speed) * speed;
        assert!(!out.diagnostics.fault);
        assert!((out.commands[0] - out.commands[1]).abs() < 1e-6);
        assert!((out.commands.sum() - drag).abs() < 0.1 * drag + 1e-3);
    }

    #[test]
    fn lateral_offset_steers_toward_path() {
        let m = model();
        let cfg = MpcConfig::default();
        let mut ctl = LieMpcController::new(m, cfg.clone()).unwrap();
        let traj = straight_reference(0.5, 400, cfg.dt);
        // Vessel 1 m to port of the path (positive world y at zero heading).
        let meas = PlantState {
            pose: Pose::from_translation(Vector3::new(0.0, 1.0, 0.0)),
            twist: Twist::new(Vector3::zeros(), Vector3::new(0.5, 0.0, 0.0)),
            time: 0.0,
        };
        let out = ctl.control_step(0, &meas, &traj, &[]);
        // Path is to starboard; yaw moment must be negative (turn right).
        assert!(
            out.wrench[2] < 0.0,
            "yaw moment {} should steer toward the path",
            out.wrench[2]
        );
    }

    #[test]
    fn saturation_clips_and_recomputes_wrench() {
        let mut params = default_vessel_params();
        params.thrust_min = -1.0;
        params.thrust_max = 1.0;
        let m = VesselModel::new(params).unwrap();
        let cfg = MpcConfig::default();
        let mut ctl = LieMpcController::new(m, cfg.clone()).unwrap();
        let traj = straight_reference(1.5, 400, cfg.dt);
        let meas = PlantState {
            pose: Pose::from_translation(Vector3::new(-3.0, 0.0, 0.0)),
            twist: Twist::zero(),
            time: 0.0,
        };
        let out = ctl.control_step(0, &meas, &traj, &[]);
        assert!(out.diagnostics.saturated);
        assert!(out.commands[0] <= 1.0 + 1e-12 && out.commands[0] >= -1.0 - 1e-12);
        let t = thrust_map(ctl.vessel().params.thruster_lever_arm);
        assert_eq!(out.wrench, t * out.commands);
    }

    #[test]
    fn fault_hold_keeps_previous_then_zeroes() {
        let m = model();
        let cfg = MpcConfig {
            fault_hold_limit: 2,
            ..MpcConfig::default()
        };
        let mut ctl = LieMpcController::new(m, cfg.clone()).unwrap();
        let traj = straight_reference(0.5, 400, cfg.dt);
        let good = PlantState {
            pose: Pose::identity(),
            twist: Twist::new(Vector3::zeros(), Vector3::new(0.5, 0.0, 0.0)),
            time: 0.0,
        };
        let prev = ctl.control_step(0, &good, &traj, &[]).commands;

        // A rotation at the log branch cut forces the error path to fault.
        let bad = PlantState {
            pose: Pose::new(
                crate::lie::Rotation::from_axis_angle(&Vector3::x(), std::f64::consts::PI - 1e-9),
                Vector3::zeros(),
            ),
            twist: Twist::zero(),
            time: 0.0,
        };
        let f1 = ctl.control_step(1, &bad, &traj, &[]);
        assert!(f1.diagnostics.fault);
        assert_eq!(f1.commands, prev);
        let f2 = ctl.control_step(2, &bad, &traj, &[]);
        assert_eq!(f2.commands, prev);
        let f3 = ctl.control_step(3, &bad, &traj, &[]);
        assert_eq!(f3.commands, Vector2::zeros());
    }
}
