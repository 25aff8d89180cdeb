//! Right-invariant observation blocks.
//!
//! Every measurement is written as `Y = X⁻¹ b + V`. The innovation is the
//! position part `z = Π(X̄Y - b)`, which to first order equals `H xi` with
//! `H = -Π b^⊙` (the bias columns are zero). Only the three informative rows
//! enter the numerics; `y` and `b` are kept on the block for inspection.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::hat;
use crate::state::{GpsFix, OdomFix, RobotState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ObservationKind {
    Kinematic(usize),
    Lidar,
    Gps,
}

/// How the rotation column of a position-fix Jacobian is filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PositionJacobian {
    /// `H = [p_fix^, 0, -I, 0]`, the exact linearization of `p̄ - p_fix`.
    #[default]
    Full,
    /// `H = [0, 0, -I, 0]`, non-zero only in the position column.
    PositionOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservationBlock {
    pub kind: ObservationKind,
    pub y: DVector<f64>,
    pub b: DVector<f64>,
    /// `Π(X̄Y - b)`.
    pub innovation: Vector3<f64>,
    /// `3 × (9 + 3N + 6)`.
    pub h: DMatrix<f64>,
    /// World-frame innovation noise.
    pub noise: Matrix3<f64>,
}

/// `(3+k)`-vector with `top` in the first three entries and `v, p, d..`
/// scalars after it.
fn layout(top: &Vector3<f64>, k: usize, coeffs: &[(usize, f64)]) -> DVector<f64> {
    let mut out = DVector::zeros(3 + k);
    out.fixed_rows_mut::<3>(0).copy_from(top);
    for &(col, c) in coeffs {
        out[3 + col] = c;
    }
    out
}

/// Kinematic block for the stance leg `leg`: `z = R̄ fk + p̄ - d̄`,
/// `H = [0, 0, -I, .., I, ..]`, `N = R̄ J Σ_q Jᵀ R̄ᵀ`.
pub fn kinematic_block(
    state: &RobotState,
    fk: &Vector3<f64>,
    jp: &Matrix3<f64>,
    joint_cov: &Matrix3<f64>,
    leg: usize,
) -> Result<ObservationBlock> {
    if leg >= state.num_legs() {
        return Err(Error::InvalidLeg(leg));
    }
    if !state.contacts[leg] {
        return Err(Error::SwingLeg(leg));
    }
    let slot = state.slot_of_leg(leg).ok_or(Error::ContactNotTracked(leg))?;
    let k = state.pose.k();
    let d_col = 2 + slot;
    let y = layout(fk, k, &[(1, 1.0), (d_col, -1.0)]);
    let b = layout(&Vector3::zeros(), k, &[(1, 1.0), (d_col, -1.0)]);
    let r = state.rotation();
    let innovation = r * fk + state.position() - state.foot(slot);

    let mut h = DMatrix::zeros(3, state.error_dim());
    h.fixed_view_mut::<3, 3>(0, 6).copy_from(&(-Matrix3::identity()));
    h.fixed_view_mut::<3, 3>(0, state.slot_offset(slot)).copy_from(&Matrix3::identity());
    let rj = r * jp;
    Ok(ObservationBlock {
        kind: ObservationKind::Kinematic(leg),
        y,
        b,
        innovation,
        h,
        noise: rj * joint_cov * rj.transpose(),
    })
}

fn position_block(
    state: &RobotState,
    position: &Vector3<f64>,
    covariance: &Matrix3<f64>,
    stamp: f64,
    max_age: f64,
    jacobian: PositionJacobian,
    kind: ObservationKind,
) -> Result<ObservationBlock> {
    let age = state.stamp - stamp;
    if age > max_age {
        return Err(Error::StaleFix { age, limit: max_age });
    }
    if covariance.cholesky().is_none() {
        return Err(Error::NotPositiveDefinite("fix covariance"));
    }
    let k = state.pose.k();
    let y = layout(&Vector3::zeros(), k, &[(1, 1.0)]);
    let b = layout(position, k, &[(1, 1.0)]);
    let mut h = DMatrix::zeros(3, state.error_dim());
    h.fixed_view_mut::<3, 3>(0, 6).copy_from(&(-Matrix3::identity()));
    if jacobian == PositionJacobian::Full {
        h.fixed_view_mut::<3, 3>(0, 0).copy_from(&hat(position));
    }
    Ok(ObservationBlock {
        kind,
        y,
        b,
        innovation: state.position() - position,
        h,
        noise: *covariance,
    })
}

/// LiDAR-odometry position block: `z = p̄ - p_lid`. Fixes older than
/// `max_age` relative to the state stamp are rejected.
pub fn lidar_block(state: &RobotState, fix: &OdomFix, max_age: f64, jacobian: PositionJacobian) -> Result<ObservationBlock> {
    position_block(state, &fix.position, &fix.covariance, fix.stamp, max_age, jacobian, ObservationKind::Lidar)
}

/// GPS position block, same structure as [`lidar_block`].
pub fn gps_block(state: &RobotState, fix: &GpsFix, max_age: f64, jacobian: PositionJacobian) -> Result<ObservationBlock> {
    position_block(state, &fix.position, &fix.covariance, fix.stamp, max_age, jacobian, ObservationKind::Gps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackedObservation {
    pub kinds: Vec<ObservationKind>,
    pub innovation: DVector<f64>,
    pub h: DMatrix<f64>,
    /// Block-diagonal.
    pub noise: DMatrix<f64>,
}

impl StackedObservation {
    pub fn rows(&self) -> usize {
        self.innovation.len()
    }
}

/// Stacks blocks in the order kinematic (ascending leg), LiDAR, GPS.
pub fn stack_blocks(mut blocks: Vec<ObservationBlock>) -> Result<StackedObservation> {
    let first = blocks.first().ok_or(Error::EmptyObservation)?;
    let dim = first.h.ncols();
    if let Some(bad) = blocks.iter().find(|b| b.h.ncols() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.h.ncols(),
        });
    }
    blocks.sort_by_key(|b| b.kind);
    let m = 3 * blocks.len();
    let mut innovation = DVector::zeros(m);
    let mut h = DMatrix::zeros(m, dim);
    let mut noise = DMatrix::zeros(m, m);
    for (i, b) in blocks.iter().enumerate() {
        innovation.fixed_rows_mut::<3>(3 * i).copy_from(&b.innovation);
        h.rows_mut(3 * i, 3).copy_from(&b.h);
        noise.fixed_view_mut::<3, 3>(3 * i, 3 * i).copy_from(&b.noise);
    }
    Ok(StackedObservation {
        kinds: blocks.iter().map(|b| b.kind).collect(),
        innovation,
        h,
        noise,
    })
}
