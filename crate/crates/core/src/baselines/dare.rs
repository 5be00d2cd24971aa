//! Discrete-time algebraic Riccati equation by fixed-point iteration.

use nalgebra::{Complex, DMatrix};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum DareError {
    #[error("Riccati recursion did not converge within {max_iterations} iterations")]
    NotConverged { max_iterations: usize },
    #[error("residual plateaued at {residual:.3e}; pair is likely unstabilizable")]
    Unstabilizable { residual: f64 },
    #[error("R + B'PB became singular")]
    SingularInnerTerm,
    #[error("dimension mismatch between A, B, Q, R")]
    DimensionMismatch,
}

/// Solution of `P = A'PA - A'PB (R + B'PB)^-1 B'PA + Q` with the
/// stabilizing gain and closed-loop diagnostics.
#[derive(Debug, Clone)]
pub struct TuningResult {
    pub p: DMatrix<f64>,
    /// `K = (R + B'PB)^-1 B'PA`.
    pub k: DMatrix<f64>,
    pub closed_loop_eigenvalues: Vec<Complex<f64>>,
    pub spectral_radius: f64,
    /// Advisory flags from the eigenvalue screening: any complex-conjugate
    /// pair present, and the largest real part.
    pub has_complex_pairs: bool,
    pub max_real_part: f64,
    pub iterations: usize,
    /// Riccati residual of the returned `P`.
    pub residual: f64,
}

const RESIDUAL_TOLERANCE: f64 = 1e-12;
const MAX_ITERATIONS: usize = 100_000;

pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<TuningResult, DareError> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.nrows() != n || q.ncols() != n || r.nrows() != m || r.ncols() != m {
        return Err(DareError::DimensionMismatch);
    }

    let riccati_rhs = |p: &DMatrix<f64>| -> Result<DMatrix<f64>, DareError> {
        let btp = b.transpose() * p;
        let inner = r + &btp * b;
        let inner_inv = inner.try_inverse().ok_or(DareError::SingularInnerTerm)?;
        let apb = a.transpose() * p * b;
        Ok(a.transpose() * p * a - &apb * inner_inv * apb.transpose() + q)
    };

    let mut p = q.clone();
    let mut iterations = 0;
    let mut prev_residual = f64::INFINITY;
    let mut plateau = 0;
    loop {
        let next = riccati_rhs(&p)?;
        let residual = (&next - &p).amax();
        p = next;
        iterations += 1;
        if residual <= RESIDUAL_TOLERANCE {
            break;
        }
        if p.amax() > 1e14 {
            return Err(DareError::Unstabilizable { residual });
        }
        // No meaningful progress over a long window while far from the
        // tolerance means the iteration is stuck.
        if residual > prev_residual * 0.9999 && residual > 1e-8 {
            plateau += 1;
            if plateau > 2000 {
                return Err(DareError::Unstabilizable { residual });
            }
        } else {
            plateau = 0;
        }
        prev_residual = residual;
        if iterations >= MAX_ITERATIONS {
            return Err(DareError::NotConverged {
                max_iterations: MAX_ITERATIONS,
            });
        }
    }

    let inner = r + b.transpose() * &p * b;
    let inner_inv = inner.try_inverse().ok_or(DareError::SingularInnerTerm)?;
    let k = inner_inv * b.transpose() * &p * a;

    let closed_loop = a - b * &k;
    let eigenvalues: Vec<Complex<f64>> = closed_loop.complex_eigenvalues().iter().copied().collect();
    let spectral_radius = eigenvalues.iter().map(|e| e.norm()).fold(0.0, f64::max);
    let has_complex_pairs = eigenvalues.iter().any(|e| e.im.abs() > 1e-9);
    let max_real_part = eigenvalues.iter().map(|e| e.re).fold(f64::NEG_INFINITY, f64::max);

    let final_residual = (riccati_rhs(&p)? - &p).amax();

    Ok(TuningResult {
        p,
        k,
        closed_loop_eigenvalues: eigenvalues,
        spectral_radius,
        has_complex_pairs,
        max_real_part,
        iterations,
        residual: final_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    #[test]
    fn scalar_closed_form() {
        // A=B=Q=R=1: p^2 - p - 1 = 0, the positive root is the golden ratio.
        let one = mat(1, 1, &[1.0]);
        let res = solve_dare(&one, &one, &one, &one).unwrap();
        let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
        assert!((res.p[(0, 0)] - phi).abs() <= 1e-10);
        assert!((res.k[(0, 0)] - phi / (1.0 + phi)).abs() <= 1e-10);
        assert!(res.spectral_radius < 1.0);
    }

    #[test]
    fn zero_dynamics_gives_q() {
        let a = mat(2, 2, &[0.0; 4]);
        let b = mat(2, 1, &[1.0, 0.0]);
        let q = mat(2, 2, &[3.0, 0.0, 0.0, 2.0]);
        let r = mat(1, 1, &[1.0]);
        let res = solve_dare(&a, &b, &q, &r).unwrap();
        assert!((&res.p - &q).amax() < 1e-12);
        assert!(res.k.amax() < 1e-12);
    }

    #[test]
    fn random_pair_residual_bound() {
        let a = mat(3, 3, &[0.9, 0.1, 0.0, 0.0, 1.05, 0.2, 0.05, 0.0, 0.8]);
        let b = mat(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.3, 0.1]);
        let q = DMatrix::identity(3, 3);
        let r = DMatrix::identity(2, 2) * 0.5;
        let res = solve_dare(&a, &b, &q, &r).unwrap();
        // Plug the returned P back into the equation.
        let inner = &r + b.transpose() * &res.p * &b;
        let apb = a.transpose() * &res.p * &b;
        let rhs = a.transpose() * &res.p * &a - &apb * inner.try_inverse().unwrap() * apb.transpose() + &q;
        assert!((&rhs - &res.p).amax() <= 1e-10);
        assert!(res.spectral_radius < 1.0);
        // P symmetric positive semidefinite.
        assert!((&res.p - res.p.transpose()).amax() < 1e-9);
        let eig = res.p.clone().symmetric_eigen();
        assert!(eig.eigenvalues.min() > -1e-9);
    }

    #[test]
    fn unstabilizable_pair_is_detected() {
        // Unstable mode with no control authority.
        let a = mat(2, 2, &[2.0, 0.0, 0.0, 0.5]);
        let b = mat(2, 1, &[0.0, 1.0]);
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::identity(1, 1);
        match solve_dare(&a, &b, &q, &r) {
            Err(DareError::Unstabilizable { .. }) | Err(DareError::NotConverged { .. }) => {}
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let a = DMatrix::identity(2, 2);
        let b = mat(3, 1, &[1.0, 0.0, 0.0]);
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::identity(1, 1);
        assert!(matches!(
            solve_dare(&a, &b, &q, &r),
            Err(DareError::DimensionMismatch)
        ));
    }
}
