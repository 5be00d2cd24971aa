//! Deterministic dense ADMM solver for convex quadratic programs
//!
//!   minimize    0.5 x' H x + g' x
//!   subject to  l <= A x <= u
//!
//! Operator-splitting iteration with fixed penalty, over-relaxation, and
//! Ruiz equilibration. The per-iteration cost is constant, which keeps the
//! controller cycle time predictable; there is no randomization anywhere,
//! so two solves of the same problem produce bitwise-identical iterates.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum QpError {
    #[error("hessian is not symmetric (asymmetry {0:.3e})")]
    AsymmetricHessian(f64),
    #[error("bound {index} has lower {lower} > upper {upper}")]
    InvertedBounds { index: usize, lower: f64, upper: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(&'static str),
    #[error("KKT matrix factorization failed")]
    FactorizationFailed,
}

/// Box-constrained convex QP data.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub constraints: DMatrix<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl QuadraticProgram {
    pub fn num_variables(&self) -> usize {
        self.gradient.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.lower.len()
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.num_variables();
        let m = self.num_constraints();
        if self.hessian.nrows() != n || self.hessian.ncols() != n {
            return Err(QpError::DimensionMismatch("hessian shape"));
        }
        if self.constraints.nrows() != m || self.constraints.ncols() != n {
            return Err(QpError::DimensionMismatch("constraint matrix shape"));
        }
        if self.upper.len() != m {
            return Err(QpError::DimensionMismatch("bound lengths"));
        }
        let asym = (&self.hessian - self.hessian.transpose()).amax();
        if asym > 1e-10 {
            return Err(QpError::AsymmetricHessian(asym));
        }
        for i in 0..m {
            if self.lower[i] > self.upper[i] {
                return Err(QpError::InvertedBounds {
                    index: i,
                    lower: self.lower[i],
                    upper: self.upper[i],
                });
            }
        }
        Ok(())
    }

    /// Plain-text dump of the problem matrices for offline inspection.
    ///
    /// Format: one `name rows cols` header per block followed by that many
    /// rows of space-separated values (`H`, `g`, `A`, `l`, `u`).
    pub fn write_debug<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let dump =
            |out: &mut W, name: &str, rows: usize, cols: usize, at: &dyn Fn(usize, usize) -> f64| {
                writeln!(out, "{name} {rows} {cols}")?;
                for i in 0..rows {
                    let row: Vec<String> = (0..cols).map(|j| format!("{:e}", at(i, j))).collect();
                    writeln!(out, "{}", row.join(" "))?;
                }
                Ok::<(), std::io::Error>(())
            };
        let n = self.num_variables();
        let m = self.num_constraints();
        dump(out, "H", n, n, &|i, j| self.hessian[(i, j)])?;
        dump(out, "g", 1, n, &|_, j| self.gradient[j])?;
        dump(out, "A", m, n, &|i, j| self.constraints[(i, j)])?;
        dump(out, "l", 1, m, &|_, j| self.lower[j])?;
        dump(out, "u", 1, m, &|_, j| self.upper[j])?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    MaxIterations,
    PrimalInfeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub primal: DVector<f64>,
    pub dual: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct QpSettings {
    /// ADMM penalty, fixed across iterations.
    pub rho: f64,
    /// Regularization added to the Hessian in the x-update.
    pub sigma: f64,
    /// Over-relaxation factor.
    pub alpha: f64,
    /// Absolute tolerance on the unscaled residuals.
    pub eps_abs: f64,
    /// Infeasibility certificate tolerance.
    pub eps_infeasible: f64,
    pub max_iterations: usize,
    /// Residuals are evaluated every this many iterations.
    pub check_interval: usize,
    /// Ruiz equilibration sweeps.
    pub ruiz_iterations: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            eps_abs: 1e-8,
            eps_infeasible: 1e-6,
            max_iterations: 4000,
            check_interval: 25,
            ruiz_iterations: 10,
        }
    }
}

/// Warm-start data, usually the previous solution.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub primal: DVector<f64>,
    pub dual: DVector<f64>,
}

/// ADMM solver instance. Owns its workspace, so a single instance must not
/// be used for concurrent solves; instances may be sent across threads.
#[derive(Debug, Clone)]
pub struct QpSolver {
    pub settings: QpSettings,
}

impl Default for QpSolver {
    fn default() -> Self {
        QpSolver {
            settings: QpSettings::default(),
        }
    }
}

struct Scaling {
    d: DVector<f64>,
    e: DVector<f64>,
    cost: f64,
}

impl QpSolver {
    pub fn new(settings: QpSettings) -> Self {
        QpSolver { settings }
    }

    pub fn solve(
        &mut self,
        qp: &QuadraticProgram,
        warm: Option<&WarmStart>,
    ) -> Result<QpSolution, QpError> {
        qp.validate()?;
        let n = qp.num_variables();
        let m = qp.num_constraints();
        let s = self.settings;

        let scaling = ruiz_equilibrate(qp, s.ruiz_iterations);
        let d = &scaling.d;
        let e = &scaling.e;
        let c = scaling.cost;

        // Scaled problem data.
        let h_s = scale_symmetric(&qp.hessian, d) * c;
        let mut g_s = qp.gradient.component_mul(d);
        g_s *= c;
        let a_s = scale_rows_cols(&qp.constraints, e, d);
        let l_s = qp.lower.component_mul(e);
        let u_s = qp.upper.component_mul(e);

        // x-update system: (H + sigma I + rho A'A) x = rhs, factored once.
        let mut kkt = &h_s + DMatrix::identity(n, n) * s.sigma;
        kkt += a_s.transpose() * &a_s * s.rho;
        let chol: Cholesky<f64, Dyn> =
            Cholesky::new(kkt).ok_or(QpError::FactorizationFailed)?;

        // Iterates live in scaled space; z always stays inside the box so
        // the primal residual is meaningful from iteration zero.
        let mut x = DVector::zeros(n);
        let mut z = clamp_box(&DVector::zeros(m), &l_s, &u_s);
        let mut y = DVector::zeros(m);
        if let Some(w) = warm {
            if w.primal.len() != n || w.dual.len() != m {
                return Err(QpError::DimensionMismatch("warm start lengths"));
            }
            x = w.primal.component_div(d);
            y = w.dual.component_div(e) * c;
            z = clamp_box(&(&a_s * &x), &l_s, &u_s);
        }
        let mut delta_y: DVector<f64> = DVector::zeros(m);

        let mut iterations = 0;
        let status;
        let primal_residual;
        let dual_residual;

        loop {
            // Residuals on the unscaled problem.
            let x_u = x.component_mul(d);
            let z_u = z.component_div(e);
            let y_u = y.component_mul(e) / c;
            let rp = (&qp.constraints * &x_u - &z_u).amax();
            let rd = (&qp.hessian * &x_u + &qp.gradient + qp.constraints.transpose() * &y_u).amax();
            if rp <= s.eps_abs && rd <= s.eps_abs {
                status = QpStatus::Solved;
                primal_residual = rp;
                dual_residual = rd;
                break;
            }
            if iterations > 0 && primal_infeasibility_certificate(qp, &delta_y, e, c, s.eps_infeasible)
            {
                status = QpStatus::PrimalInfeasible;
                primal_residual = rp;
                dual_residual = rd;
                break;
            }
            if iterations >= s.max_iterations {
                status = QpStatus::MaxIterations;
                primal_residual = rp;
                dual_residual = rd;
                break;
            }

            // A block of ADMM iterations between residual checks.
            let block = s.check_interval.min(s.max_iterations - iterations).max(1);
            for _ in 0..block {
                let rhs = &x * s.sigma - &g_s + a_s.transpose() * (&z * s.rho - &y);
                let x_tilde = chol.solve(&rhs);
                let z_tilde = &a_s * &x_tilde;
                let x_next = &x_tilde * s.alpha + &x * (1.0 - s.alpha);
                let z_relaxed = &z_tilde * s.alpha + &z * (1.0 - s.alpha);
                let z_arg = &z_relaxed + &y / s.rho;
                let z_next = clamp_box(&z_arg, &l_s, &u_s);
                let y_next = &y + (&z_relaxed - &z_next) * s.rho;
                delta_y = &y_next - &y;
                x = x_next;
                z = z_next;
                y = y_next;
                iterations += 1;
            }
        }

        Ok(QpSolution {
            primal: x.component_mul(d),
            dual: y.component_mul(e) / c,
            status,
            iterations,
            primal_residual,
            dual_residual,
        })
    }
}

fn clamp_box(v: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| v[i].clamp(l[i], u[i]))
}

/// `D H D` for diagonal `D`.
fn scale_symmetric(h: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(h.nrows(), h.ncols(), |i, j| h[(i, j)] * d[i] * d[j])
}

/// `E A D` for diagonal `E`, `D`.
fn scale_rows_cols(a: &DMatrix<f64>, e: &DVector<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] * e[i] * d[j])
}

/// Modified Ruiz equilibration on the symmetric stack `[H A'; A 0]`, plus
/// OSQP-style cost normalization.
fn ruiz_equilibrate(qp: &QuadraticProgram, iterations: usize) -> Scaling {
    let n = qp.num_variables();
    let m = qp.num_constraints();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);

    for _ in 0..iterations {
        // Column infinity-norms of the scaled stacked matrix.
        for j in 0..n {
            let mut norm: f64 = 0.0;
            for i in 0..n {
                norm = norm.max((qp.hessian[(i, j)] * d[i] * d[j]).abs());
            }
            for i in 0..m {
                norm = norm.max((qp.constraints[(i, j)] * e[i] * d[j]).abs());
            }
            if norm > 1e-12 {
                d[j] /= norm.sqrt();
            }
        }
        for i in 0..m {
            let mut norm: f64 = 0.0;
            for j in 0..n {
                norm = norm.max((qp.constraints[(i, j)] * e[i] * d[j]).abs());
            }
            if norm > 1e-12 {
                e[i] /= norm.sqrt();
            }
        }
    }

    // Cost scaling keeps the objective comparable to the constraints.
    let mut mean_col = 0.0;
    for j in 0..n {
        let mut norm: f64 = 0.0;
        for i in 0..n {
            norm = norm.max((qp.hessian[(i, j)] * d[i] * d[j]).abs());
        }
        mean_col += norm;
    }
    mean_col /= n.max(1) as f64;
    let g_norm = qp
        .gradient
        .iter()
        .enumerate()
        .map(|(j, v)| (v * d[j]).abs())
        .fold(0.0f64, f64::max);
    let denom = mean_col.max(g_norm);
    let cost = if denom > 1e-12 { 1.0 / denom } else { 1.0 };

    Scaling { d, e, cost }
}

/// Standard certificate: `delta_y` proves primal infeasibility when
/// `A' delta_y ~ 0` while the support function of the bounds is negative.
fn primal_infeasibility_certificate(
    qp: &QuadraticProgram,
    delta_y_scaled: &DVector<f64>,
    e: &DVector<f64>,
    cost: f64,
    eps: f64,
) -> bool {
    let delta_y = delta_y_scaled.component_mul(e) / cost;
    let norm = delta_y.amax();
    if norm <= 1e-14 {
        return false;
    }
    let at_dy = (qp.constraints.transpose() * &delta_y).amax();
    if at_dy > eps * norm {
        return false;
    }
    let mut support = 0.0;
    for i in 0..delta_y.len() {
        let dy = delta_y[i];
        if dy > 0.0 {
            if qp.upper[i].is_infinite() {
                return false;
            }
            support += qp.upper[i] * dy;
        } else if dy < 0.0 {
            if qp.lower[i].is_infinite() {
                return false;
            }
            support += qp.lower[i] * dy;
        }
    }
    support < -eps * norm
}
