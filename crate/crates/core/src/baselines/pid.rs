//! Two-layer PID baseline: an outer loop turning pose errors into surge and
//! yaw-rate references, and inner PID loops tracking those references with
//! common and differential thrust.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::lie::{log_so3, Pose, Twist};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Clamp on the integral state (anti-windup).
    pub integral_limit: f64,
    /// Clamp on the loop output.
    pub output_limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PidConfig {
    /// Along-track error to surge reference, 1/s.
    pub surge_error_gain: f64,
    /// Cross-track error to yaw-rate reference, rad/(m s).
    pub cross_track_gain: f64,
    /// Heading error to yaw-rate reference, 1/s.
    pub heading_gain: f64,
    /// Saturation of the surge reference, m/s.
    pub surge_ref_limit: f64,
    /// Saturation of the yaw-rate reference, rad/s.
    pub yaw_ref_limit: f64,
    /// Inner loop on surge velocity, output in N of total thrust.
    pub surge_pid: PidGains,
    /// Inner loop on yaw rate, output in N m of yaw moment.
    pub yaw_pid: PidGains,
}

impl Default for PidConfig {
    fn default() -> Self {
        PidConfig {
            surge_error_gain: 0.9,
            cross_track_gain: 0.5,
            heading_gain: 1.4,
            surge_ref_limit: 1.2,
            yaw_ref_limit: 0.8,
            surge_pid: PidGains {
                kp: 80.0,
                ki: 25.0,
                kd: 0.0,
                integral_limit: 2.0,
                output_limit: 100.0,
            },
            yaw_pid: PidGains {
                kp: 30.0,
                ki: 8.0,
                kd: 0.5,
                integral_limit: 1.5,
                output_limit: 25.0,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct ScalarPid {
    integral: f64,
    prev_error: Option<f64>,
}

impl ScalarPid {
    fn step(&mut self, gains: &PidGains, error: f64, dt: f64) -> f64 {
        self.integral = (self.integral + error * dt).clamp(-gains.integral_limit, gains.integral_limit);
        let derivative = match self.prev_error {
            Some(prev) => (error - prev) / dt,
            None => 0.0,
        };
        self.prev_error = Some(error);
        (gains.kp * error + gains.ki * self.integral + gains.kd * derivative)
            .clamp(-gains.output_limit, gains.output_limit)
    }
}

/// Two-layer PID controller producing propeller thrusts.
#[derive(Debug, Clone)]
pub struct PidController {
    pub config: PidConfig,
    surge_loop: ScalarPid,
    yaw_loop: ScalarPid,
    lever_arm: f64,
    thrust_min: f64,
    thrust_max: f64,
}

impl PidController {
    pub fn new(config: PidConfig, lever_arm: f64, thrust_min: f64, thrust_max: f64) -> Self {
        PidController {
            config,
            surge_loop: ScalarPid::default(),
            yaw_loop: ScalarPid::default(),
            lever_arm,
            thrust_min,
            thrust_max,
        }
    }

    /// Outer loop: body-frame pose errors to twist references.
    pub fn outer_references(&self, along_track: f64, cross_track: f64, heading_error: f64) -> (f64, f64) {
        let c = &self.config;
        let v_ref = (c.surge_error_gain * along_track).clamp(-c.surge_ref_limit, c.surge_ref_limit);
        let w_ref = (c.cross_track_gain * cross_track + c.heading_gain * heading_error)
            .clamp(-c.yaw_ref_limit, c.yaw_ref_limit);
        (v_ref, w_ref)
    }

    /// One control step from pose error and measured twist.
    pub fn step(&mut self, pose: &Pose, reference: &Pose, twist: &Twist, dt: f64) -> Vector2<f64> {
        // Position error expressed in the body frame: x ahead, y to port.
        let e_body = pose.rotation.transpose().rotate(&(reference.position - pose.position));
        let heading_error = relative_yaw(pose, reference);
        let (v_ref, w_ref) = self.outer_references(e_body.x, e_body.y, heading_error);

        let total = self.surge_loop.step(&self.config.surge_pid, v_ref - twist.linear.x, dt);
        let moment = self.yaw_loop.step(&self.config.yaw_pid, w_ref - twist.angular.z, dt);
        let differential = moment / self.lever_arm;

        Vector2::new(
            ((total - differential) / 2.0).clamp(self.thrust_min, self.thrust_max),
            ((total + differential) / 2.0).clamp(self.thrust_min, self.thrust_max),
        )
    }

    /// Integral states, exposed for the anti-windup checks.
    pub fn integral_states(&self) -> (f64, f64) {
        (self.surge_loop.integral, self.yaw_loop.integral)
    }
}

/// Yaw of the rotation taking the vessel heading onto the reference heading.
fn relative_yaw(pose: &Pose, reference: &Pose) -> f64 {
    let rel = pose.rotation.transpose() * reference.rotation;
    match log_so3(&rel) {
        Ok(w) => w.z,
        // At the branch cut the heading error is half a turn either way.
        Err(_) => std::f64::consts::PI,
    }
}
