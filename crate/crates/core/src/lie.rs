//! SE(3)/SO(3) group and algebra operations.
//!
//! Conventions used throughout the crate:
//! - Twists are ordered angular-then-linear, `xi = [omega; v]`.
//! - Rotations are stored as 3x3 matrices.
//! - `exp`/`log` use closed forms (Rodrigues plus the left Jacobian) with
//!   Taylor branches below `SMALL_ANGLE` so the 50 Hz loop never touches a
//!   series evaluation.

use nalgebra::{Matrix3, Matrix4, Matrix6, Vector3, Vector6};
use thiserror::Error;

/// Rotation angle below which Taylor expansions replace the closed forms.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Margin kept away from the `log` branch point at angle pi.
pub const PI_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum LieError {
    /// `log` is ill-conditioned when the rotation angle approaches pi.
    #[error("rotation angle {angle} is within {PI_MARGIN} of pi; log map ill-conditioned")]
    AngleNearPi { angle: f64 },
}

/// Element of SO(3), stored as an orthogonal 3x3 matrix with det +1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wrap a matrix that is already orthogonal (checked in debug builds only).
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        debug_assert!((m * m.transpose() - Matrix3::identity()).norm() < 1e-6);
        Rotation(m)
    }

    /// Rotation by `angle` about a unit `axis`.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        exp_so3(&(axis.normalize() * angle))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    pub fn inverse(&self) -> Rotation {
        self.transpose()
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Project back onto SO(3) after numerical drift.
    ///
    /// Two Newton steps of `R <- R(3I - R^T R)/2`, quadratically convergent
    /// for nearly-orthogonal inputs; keeps per-step integrator drift below
    /// 1e-9.
    pub fn orthonormalize(&self) -> Rotation {
        let mut r = self.0;
        for _ in 0..2 {
            let rtr = r.transpose() * r;
            r = r * (Matrix3::identity() * 1.5 - rtr * 0.5);
        }
        Rotation(r)
    }

    /// Frobenius distance from orthogonality, `|R^T R - I|_F`.
    pub fn orthogonality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).norm()
    }

    pub fn angle(&self) -> f64 {
        let c = ((self.0.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

/// Element of SE(3): rotation plus position of the body frame in the world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub position: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Rotation::identity(),
            position: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation, position: Vector3<f64>) -> Self {
        Pose { rotation, position }
    }

    pub fn from_translation(position: Vector3<f64>) -> Self {
        Pose {
            rotation: Rotation::identity(),
            position,
        }
    }

    /// Homogeneous 4x4 matrix `[R p; 0 1]`.
    pub fn homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.position);
        m
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            position: -(rt.rotate(&self.position)),
        }
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            position: self.rotation.rotate(&other.position) + self.position,
        }
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

/// Body-frame twist `[omega; v]` (rad/s, m/s).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    pub angular: Vector3<f64>,
    pub linear: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Twist::default()
    }

    pub fn new(angular: Vector3<f64>, linear: Vector3<f64>) -> Self {
        Twist { angular, linear }
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Twist {
            angular: v.fixed_rows::<3>(0).into(),
            linear: v.fixed_rows::<3>(3).into(),
        }
    }

    pub fn as_vector(&self) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.angular);
        v.fixed_rows_mut::<3>(3).copy_from(&self.linear);
        v
    }

    pub fn scale(&self, s: f64) -> Twist {
        Twist {
            angular: self.angular * s,
            linear: self.linear * s,
        }
    }

    pub fn norm(&self) -> f64 {
        (self.angular.norm_squared() + self.linear.norm_squared()).sqrt()
    }
}

impl std::ops::Add for Twist {
    type Output = Twist;
    fn add(self, rhs: Twist) -> Twist {
        Twist {
            angular: self.angular + rhs.angular,
            linear: self.linear + rhs.linear,
        }
    }
}

impl std::ops::Sub for Twist {
    type Output = Twist;
    fn sub(self, rhs: Twist) -> Twist {
        Twist {
            angular: self.angular - rhs.angular,
            linear: self.linear - rhs.linear,
        }
    }
}

/// Skew-symmetric matrix of a 3-vector, `hat3(w) u = w x u`.
pub fn hat3(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -w.z, w.y, //
        w.z, 0.0, -w.x, //
        -w.y, w.x, 0.0,
    )
}

/// Inverse of [`hat3`].
pub fn vee3(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// se(3) matrix form of a twist, `[hat3(omega) v; 0 0]`.
pub fn hat6(xi: &Twist) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&hat3(&xi.angular));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&xi.linear);
    m
}

/// Inverse of [`hat6`].
pub fn vee6(m: &Matrix4<f64>) -> Twist {
    Twist {
        angular: vee3(&m.fixed_view::<3, 3>(0, 0).into()),
        linear: m.fixed_view::<3, 1>(0, 3).into(),
    }
}

/// Coefficients of the Rodrigues formula and left Jacobian, with Taylor
/// branches below [`SMALL_ANGLE`].
///
/// Returns `(a, b, c)` with `a = sin(t)/t`, `b = (1-cos(t))/t^2`,
/// `c = (t-sin(t))/t^3`.
fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    } else {
        let t2 = theta * theta;
        (
            theta.sin() / theta,
            (1.0 - theta.cos()) / t2,
            (theta - theta.sin()) / (t2 * theta),
        )
    }
}

/// Exponential map of so(3).
pub fn exp_so3(omega: &Vector3<f64>) -> Rotation {
    let theta = omega.norm();
    let (a, b, _) = rodrigues_coeffs(theta);
    let w = hat3(omega);
    Rotation(Matrix3::identity() + w * a + w * w * b)
}

/// Left Jacobian of SO(3): `V` such that `exp_se3(xi)` translates by `V v`.
pub fn left_jacobian_so3(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let (_, b, c) = rodrigues_coeffs(theta);
    let w = hat3(omega);
    Matrix3::identity() + w * b + w * w * c
}

/// Logarithm map of SO(3).
pub fn log_so3(r: &Rotation) -> Result<Vector3<f64>, LieError> {
    let theta = r.angle();
    if theta > std::f64::consts::PI - PI_MARGIN {
        return Err(LieError::AngleNearPi { angle: theta });
    }
    let m = r.matrix();
    let antisym = (m - m.transpose()) / 2.0;
    let w = vee3(&antisym);
    // w = sin(theta) * axis; scale by theta/sin(theta).
    let scale = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        1.0 + t2 / 6.0 + t2 * t2 * 7.0 / 360.0
    } else {
        theta / theta.sin()
    };
    Ok(w * scale)
}

/// Exponential map of se(3): closed form matching the matrix-exponential
/// series to 1e-9.
pub fn exp_se3(xi: &Twist) -> Pose {
    let rotation = exp_so3(&xi.angular);
    let position = left_jacobian_so3(&xi.angular) * xi.linear;
    Pose { rotation, position }
}

/// Logarithm map of SE(3).
///
/// Fails with [`LieError::AngleNearPi`] when the rotation angle is within
/// [`PI_MARGIN`] of pi.
pub fn log_se3(x: &Pose) -> Result<Twist, LieError> {
    let omega = log_so3(&x.rotation)?;
    let v_inv = inverse_left_jacobian_so3(&omega);
    Ok(Twist {
        angular: omega,
        linear: v_inv * x.position,
    })
}

/// Inverse of the SO(3) left Jacobian.
fn inverse_left_jacobian_so3(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let w = hat3(omega);
    // coefficient of w^2: (1 - theta*sin/(2(1-cos))) / theta^2
    let c = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / (theta * theta)
    };
    Matrix3::identity() - w * 0.5 + w * w * c
}

/// Adjoint of a group element, `Ad_X = [R 0; hat3(p) R, R]`.
pub fn adjoint_big(x: &Pose) -> Matrix6<f64> {
    let r = x.rotation.matrix();
    let pr = hat3(&x.position) * r;
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&pr);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(r);
    m
}

/// Adjoint of an algebra element, `ad_xi = [hat3(omega) 0; hat3(v) hat3(omega)]`.
pub fn adjoint_small(xi: &Twist) -> Matrix6<f64> {
    let wh = hat3(&xi.angular);
    let vh = hat3(&xi.linear);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&wh);
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&vh);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&wh);
    m
}
