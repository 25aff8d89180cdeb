//! 3-DoF leg kinematics and slip detection.
//!
//! Joint 1 is abduction about body x, joints 2 and 3 are hip and knee about
//! y. With `s = ±1` the lateral side of the leg:
//!
//! ```text
//! fk(q) = hip + Rx(q1)·( (0, s·l1, 0) + Ry(q2)·( (0,0,-l2) + Ry(q3)·(0,0,-l3) ) )
//! ```

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::KinSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LegModel {
    /// Hip joint position in the body frame.
    pub hip: Vector3<f64>,
    /// Abduction offset.
    pub l1: f64,
    /// Thigh length.
    pub l2: f64,
    /// Shank length.
    pub l3: f64,
    /// +1 for left legs, -1 for right legs.
    pub side: f64,
}

impl LegModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.l1 > 0.0 && self.l2 > 0.0 && self.l3 > 0.0) {
            return Err(Error::Config("leg link lengths must be positive".into()));
        }
        if self.side.abs() != 1.0 {
            return Err(Error::Config("leg side must be +1 or -1".into()));
        }
        Ok(())
    }
}

/// Four legs in the order front-left, front-right, rear-left, rear-right.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotModel {
    pub legs: Vec<LegModel>,
    /// kg
    pub mass: f64,
}

impl Default for RobotModel {
    fn default() -> Self {
        let leg = |x: f64, y: f64, side: f64| LegModel {
            hip: Vector3::new(x, y, 0.0),
            l1: 0.08,
            l2: 0.22,
            l3: 0.22,
            side,
        };
        Self {
            legs: vec![
                leg(0.25, 0.06, 1.0),
                leg(0.25, -0.06, -1.0),
                leg(-0.25, 0.06, 1.0),
                leg(-0.25, -0.06, -1.0),
            ],
            mass: 25.0,
        }
    }
}

impl RobotModel {
    pub fn num_legs(&self) -> usize {
        self.legs.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.legs.is_empty() {
            return Err(Error::Config("robot has no legs".into()));
        }
        if !(self.mass > 0.0) {
            return Err(Error::Config("robot mass must be positive".into()));
        }
        self.legs.iter().try_for_each(LegModel::validate)
    }
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Foot position in the body frame.
pub fn fk(leg: &LegModel, q: &Vector3<f64>) -> Vector3<f64> {
    let shank = rot_y(q[2]) * Vector3::new(0.0, 0.0, -leg.l3);
    let u = rot_y(q[1]) * (Vector3::new(0.0, 0.0, -leg.l2) + shank);
    leg.hip + rot_x(q[0]) * (Vector3::new(0.0, leg.side * leg.l1, 0.0) + u)
}

/// Analytical Jacobian `∂fk/∂q`.
pub fn fk_jacobian(leg: &LegModel, q: &Vector3<f64>) -> Matrix3<f64> {
    let ey = Vector3::y();
    let rx = rot_x(q[0]);
    let shank = rot_y(q[1] + q[2]) * Vector3::new(0.0, 0.0, -leg.l3);
    let u = rot_y(q[1]) * Vector3::new(0.0, 0.0, -leg.l2) + shank;
    let v = Vector3::new(0.0, leg.side * leg.l1, 0.0) + u;
    Matrix3::from_columns(&[
        rx * Vector3::x().cross(&v),
        rx * ey.cross(&u),
        rx * ey.cross(&shank),
    ])
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let w = a.rem_euclid(two_pi);
    if w > std::f64::consts::PI {
        w - two_pi
    } else {
        w
    }
}

/// Closed-form inverse kinematics with the knee bent backwards (`q3 ≤ 0`)
/// and the foot below the hip in the leg plane.
pub fn ik(leg: &LegModel, leg_index: usize, foot: &Vector3<f64>) -> Result<Vector3<f64>> {
    let t = foot - leg.hip;
    let yz2 = t.y * t.y + t.z * t.z - leg.l1 * leg.l1;
    if yz2 < 0.0 {
        return Err(Error::Unreachable(leg_index));
    }
    let l = yz2.sqrt();
    let q1 = wrap_angle(t.z.atan2(t.y) - (-l).atan2(leg.side * leg.l1));
    let r2 = t.x * t.x + l * l;
    let c3 = (r2 - leg.l2 * leg.l2 - leg.l3 * leg.l3) / (2.0 * leg.l2 * leg.l3);
    if !(-1.0..=1.0).contains(&c3) {
        return Err(Error::Unreachable(leg_index));
    }
    let q3 = -c3.acos();
    let wx = -leg.l3 * q3.sin();
    let wz = -leg.l2 - leg.l3 * q3.cos();
    let q2 = wrap_angle(t.x.atan2(-l) - wx.atan2(wz));
    Ok(Vector3::new(q1, q2, q3))
}

/// Foot velocity relative to the world, expressed in the body frame:
/// `J q̇ + ω × fk(q) + Rᵀv`. Zero for a foot that is not slipping.
pub fn foot_velocity(
    leg: &LegModel,
    q: &Vector3<f64>,
    qdot: &Vector3<f64>,
    omega: &Vector3<f64>,
    body_velocity: &Vector3<f64>,
) -> Vector3<f64> {
    fk_jacobian(leg, q) * qdot + omega.cross(&fk(leg, q)) + body_velocity
}

/// Covariance inflation factor for a stance leg: 1 while the estimated foot
/// speed is below `threshold`, `(s/threshold)²` above it, capped at
/// `max_factor`. Swing legs return 1.
#[allow(clippy::too_many_arguments)]
pub fn slip_check(
    leg: &LegModel,
    q: &Vector3<f64>,
    qdot: &Vector3<f64>,
    omega: &Vector3<f64>,
    body_velocity: &Vector3<f64>,
    contact: bool,
    threshold: f64,
    max_factor: f64,
) -> f64 {
    if !contact {
        return 1.0;
    }
    let s = foot_velocity(leg, q, qdot, omega, body_velocity).norm();
    slip_factor(s, threshold, max_factor)
}

pub fn slip_factor(speed: f64, threshold: f64, max_factor: f64) -> f64 {
    if speed < threshold {
        1.0
    } else {
        ((speed / threshold).powi(2)).min(max_factor)
    }
}

/// Force-threshold contact detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrfContactDetector {
    /// N
    pub threshold: f64,
}

impl Default for GrfContactDetector {
    fn default() -> Self {
        Self { threshold: 20.0 }
    }
}

impl GrfContactDetector {
    pub fn detect(&self, sample: &KinSample) -> Vec<bool> {
        sample.grf.iter().map(|f| *f > self.threshold).collect()
    }
}
