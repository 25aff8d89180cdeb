//! Estimator state, invariant error and sensor sample types.
//!
//! The pose lives on SE_{2+N}(3) with column order `(v, p, d_1..d_N)`. Each
//! contact slot remembers which leg it belongs to. The error vector used by
//! every estimator is `[phi, xi_v, xi_p, xi_d.., zeta_g, zeta_a]` with
//! `X = Exp(xi)·X̄` and `b = b̄ + zeta`.

use nalgebra::{DVector, Matrix3, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::{sek3_exp, sek3_log, GroupElement, Tangent};

pub const VEL: usize = 0;
pub const POS: usize = 1;
/// Column index of the first contact slot.
pub const FOOT0: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct RobotState {
    pub pose: GroupElement,
    /// `(b_gyro, b_accel)`.
    pub bias: Vector6<f64>,
    /// Per-leg contact flags.
    pub contacts: Vec<bool>,
    /// Leg owning each contact slot, in slot order.
    pub slot_legs: Vec<usize>,
    pub stamp: f64,
}

impl RobotState {
    pub fn new(
        rotation: Matrix3<f64>,
        velocity: Vector3<f64>,
        position: Vector3<f64>,
        bias: Vector6<f64>,
        num_legs: usize,
        stamp: f64,
    ) -> Self {
        Self {
            pose: GroupElement::new(rotation, vec![velocity, position]),
            bias,
            contacts: vec![false; num_legs],
            slot_legs: Vec::new(),
            stamp,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        self.pose.rotation()
    }

    pub fn velocity(&self) -> &Vector3<f64> {
        self.pose.column(VEL)
    }

    pub fn position(&self) -> &Vector3<f64> {
        self.pose.column(POS)
    }

    pub fn foot(&self, slot: usize) -> &Vector3<f64> {
        self.pose.column(FOOT0 + slot)
    }

    pub fn gyro_bias(&self) -> Vector3<f64> {
        self.bias.fixed_rows::<3>(0).into_owned()
    }

    pub fn accel_bias(&self) -> Vector3<f64> {
        self.bias.fixed_rows::<3>(3).into_owned()
    }

    pub fn num_slots(&self) -> usize {
        self.slot_legs.len()
    }

    pub fn num_legs(&self) -> usize {
        self.contacts.len()
    }

    pub fn slot_of_leg(&self, leg: usize) -> Option<usize> {
        self.slot_legs.iter().position(|&l| l == leg)
    }

    /// Dimension of `[xi, zeta]`: `9 + 3N + 6`.
    pub fn error_dim(&self) -> usize {
        self.pose.tangent_dim() + 6
    }

    /// Offset of the bias block inside the error vector.
    pub fn bias_offset(&self) -> usize {
        self.pose.tangent_dim()
    }

    /// Offset of a slot's 3-block inside the error vector.
    pub fn slot_offset(&self, slot: usize) -> usize {
        9 + 3 * slot
    }

    /// Appends a contact slot for `leg` at world position `d`.
    pub fn add_contact(&mut self, leg: usize, d: Vector3<f64>) -> Result<usize> {
        if leg >= self.num_legs() {
            return Err(Error::InvalidLeg(leg));
        }
        if self.slot_of_leg(leg).is_some() {
            return Err(Error::ContactAlreadyTracked(leg));
        }
        self.pose.push_column(d);
        self.slot_legs.push(leg);
        self.contacts[leg] = true;
        Ok(self.slot_legs.len() - 1)
    }

    /// Removes the contact slot of `leg`, returning its former slot index.
    pub fn remove_contact(&mut self, leg: usize) -> Result<usize> {
        if leg >= self.num_legs() {
            return Err(Error::InvalidLeg(leg));
        }
        let slot = self.slot_of_leg(leg).ok_or(Error::ContactNotTracked(leg))?;
        self.pose.remove_column(FOOT0 + slot);
        self.slot_legs.remove(slot);
        self.contacts[leg] = false;
        Ok(slot)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateError {
    pub xi: Tangent,
    pub zeta: Vector6<f64>,
}

impl StateError {
    pub fn zeros(num_slots: usize) -> Self {
        Self {
            xi: Tangent::zeros(2 + num_slots),
            zeta: Vector6::zeros(),
        }
    }

    pub fn dim(&self) -> usize {
        self.xi.dim() + 6
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.xi.dim();
        let mut v = DVector::zeros(n + 6);
        v.rows_mut(0, n).copy_from(&self.xi.to_vector());
        v.fixed_rows_mut::<6>(n).copy_from(&self.zeta);
        v
    }

    pub fn from_vector(v: &DVector<f64>) -> Result<Self> {
        if v.len() < 15 || (v.len() - 6) % 3 != 0 {
            return Err(Error::DimensionMismatch {
                expected: 15,
                got: v.len(),
            });
        }
        let n = v.len() - 6;
        Ok(Self {
            xi: Tangent::from_slice(&v.as_slice()[..n]),
            zeta: v.fixed_rows::<6>(n).into_owned(),
        })
    }
}

/// `xi = Log(X·X̄⁻¹)`, `zeta = b - b̄`.
pub fn right_invariant_error(truth: &RobotState, estimate: &RobotState) -> Result<StateError> {
    if truth.slot_legs != estimate.slot_legs {
        return Err(Error::SlotMismatch);
    }
    let e = truth.pose.compose(&estimate.pose.inverse());
    Ok(StateError {
        xi: sek3_log(&e),
        zeta: truth.bias - estimate.bias,
    })
}

/// `X ← Exp(xi)·X̄`, `b ← b̄ + zeta`.
pub fn retract(estimate: &RobotState, delta: &StateError) -> Result<RobotState> {
    if delta.xi.k() != estimate.pose.k() {
        return Err(Error::DimensionMismatch {
            expected: estimate.error_dim(),
            got: delta.dim(),
        });
    }
    let mut out = estimate.clone();
    out.pose = sek3_exp(&delta.xi).compose(&estimate.pose);
    out.bias += delta.zeta;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub stamp: f64,
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinSample {
    pub stamp: f64,
    /// Joint angles, 3 per leg.
    pub q: Vec<f64>,
    /// Joint rates, 3 per leg.
    pub qdot: Vec<f64>,
    pub contacts: Vec<bool>,
    /// Vertical ground reaction force per leg (N).
    pub grf: Vec<f64>,
}

impl KinSample {
    pub fn num_legs(&self) -> usize {
        self.contacts.len()
    }

    pub fn leg_q(&self, leg: usize) -> Vector3<f64> {
        Vector3::new(self.q[3 * leg], self.q[3 * leg + 1], self.q[3 * leg + 2])
    }

    pub fn leg_qdot(&self, leg: usize) -> Vector3<f64> {
        Vector3::new(
            self.qdot[3 * leg],
            self.qdot[3 * leg + 1],
            self.qdot[3 * leg + 2],
        )
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.contacts.len();
        if self.q.len() != 3 * m || self.qdot.len() != 3 * m || self.grf.len() != m {
            return Err(Error::Data(format!(
                "kinematic sample at {} has inconsistent array lengths",
                self.stamp
            )));
        }
        Ok(())
    }
}

/// World-frame position fix from LiDAR odometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdomFix {
    pub stamp: f64,
    pub position: Vector3<f64>,
    pub covariance: Matrix3<f64>,
}

/// World-frame (local Cartesian) GPS fix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpsFix {
    pub stamp: f64,
    pub position: Vector3<f64>,
    pub covariance: Matrix3<f64>,
}
