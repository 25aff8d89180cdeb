//! Right-invariant extended Kalman filter.
//!
//! Contact points are tracked as dynamic slots: a slot is appended when a
//! leg touches down and removed when it lifts off. Exteroceptive position
//! fixes are gated individually and stacked with the kinematic blocks of the
//! same tick into a single update. With no fixes supplied the filter runs the
//! proprioceptive-only code path unchanged.

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{error_transition, symmetrize, system_matrices, NoiseParams};
use crate::error::{Error, Result};
use crate::kinematics::{fk, fk_jacobian, slip_check, RobotModel};
use crate::observations::{
    gps_block, kinematic_block, lidar_block, stack_blocks, ObservationBlock, PositionJacobian,
    StackedObservation,
};
use crate::state::{retract, GpsFix, ImuSample, KinSample, OdomFix, RobotState, StateError};

/// Initial variances of the base state and of a freshly added foot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialCovariance {
    /// rad²
    pub rotation: f64,
    /// m²/s²
    pub velocity: f64,
    /// m²
    pub position: f64,
    /// (rad/s)²
    pub gyro_bias: f64,
    /// (m/s²)²
    pub accel_bias: f64,
}

impl Default for InitialCovariance {
    fn default() -> Self {
        Self {
            rotation: 1e-4,
            velocity: 1e-4,
            position: 1e-6,
            gyro_bias: 1e-6,
            accel_bias: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub noise: NoiseParams,
    pub initial: InitialCovariance,
    /// Joint encoder noise (rad).
    pub joint_noise: f64,
    /// Mahalanobis gate for position fixes (3 DoF, 99%).
    pub chi2_threshold: f64,
    /// Fixes older than this (s) are rejected.
    pub max_fix_age: f64,
    /// Foot speed (m/s) above which a stance leg is treated as slipping.
    pub slip_threshold: f64,
    pub slip_inflation_max: f64,
    pub position_jacobian: PositionJacobian,
    /// Updates whose innovation covariance exceeds this condition number are skipped.
    pub max_condition: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            noise: NoiseParams::default(),
            initial: InitialCovariance::default(),
            joint_noise: 5e-3,
            chi2_threshold: 11.345,
            max_fix_age: 0.5,
            slip_threshold: 0.15,
            slip_inflation_max: 100.0,
            position_jacobian: PositionJacobian::Full,
            max_condition: 1e12,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        let i = &self.initial;
        let positive = [
            i.rotation,
            i.velocity,
            i.position,
            i.gyro_bias,
            i.accel_bias,
            self.joint_noise,
            self.chi2_threshold,
            self.max_fix_age,
            self.slip_threshold,
            self.slip_inflation_max,
            self.max_condition,
        ];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Config("filter parameters must be positive and finite".into()));
        }
        if self.slip_inflation_max < 1.0 {
            return Err(Error::Config("slip inflation cap must be at least 1".into()));
        }
        Ok(())
    }

    pub fn joint_covariance(&self) -> Matrix3<f64> {
        Matrix3::identity() * (self.joint_noise * self.joint_noise)
    }

    /// Block-diagonal covariance for a state without contact slots.
    pub fn base_covariance(&self) -> DMatrix<f64> {
        let i = &self.initial;
        let mut p = DMatrix::zeros(15, 15);
        for (o, v) in [(0, i.rotation), (3, i.velocity), (6, i.position), (9, i.gyro_bias), (12, i.accel_bias)] {
            for k in 0..3 {
                p[(o + k, o + k)] = v;
            }
        }
        p
    }
}

/// Appends a contact slot's rows/cols to `cov`. The new foot error equals
/// the position error plus `R̄ J w_q`, so its block copies the position
/// rows and adds `noise`.
pub fn augment_covariance(cov: &DMatrix<f64>, slot_offset: usize, noise: &Matrix3<f64>) -> DMatrix<f64> {
    let n = cov.nrows();
    let m = n + 3;
    let old_index = |i: usize| -> Option<usize> {
        if i < slot_offset {
            Some(i)
        } else if i >= slot_offset + 3 {
            Some(i - 3)
        } else {
            None
        }
    };
    // New index i maps to an old row, or to the position row for the new slot.
    let src = |i: usize| old_index(i).unwrap_or_else(|| 6 + (i - slot_offset));
    let mut out = DMatrix::zeros(m, m);
    for j in 0..m {
        for i in 0..m {
            out[(i, j)] = cov[(src(i), src(j))];
        }
    }
    let mut block = out.fixed_view_mut::<3, 3>(slot_offset, slot_offset);
    block += noise;
    out
}

/// Removes three rows/cols starting at `offset`.
pub fn remove_block(cov: &DMatrix<f64>, offset: usize) -> DMatrix<f64> {
    cov.clone().remove_rows(offset, 3).remove_columns(offset, 3)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UpdateOutcome {
    Applied,
    Skipped { condition: f64 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub predictions: u64,
    pub updates: u64,
    pub skipped_updates: u64,
    pub lidar_accepted: u64,
    pub lidar_rejected: u64,
    pub gps_accepted: u64,
    pub gps_rejected: u64,
    pub stale_fixes: u64,
    pub slip_inflations: u64,
}

#[derive(Clone, Debug)]
pub struct InvariantEkf {
    pub state: RobotState,
    pub cov: DMatrix<f64>,
    pub config: FilterConfig,
    pub stats: FilterStats,
    /// Legs whose slot was created from the current kinematic sample.
    fresh: Vec<usize>,
    /// Raw gyro reading of the last prediction, for the slip detector.
    last_gyro: Vector3<f64>,
}

impl InvariantEkf {
    /// `state` may already carry contact slots; `cov` must match its error
    /// dimension.
    pub fn new(state: RobotState, cov: DMatrix<f64>, config: FilterConfig) -> Result<Self> {
        config.validate()?;
        let dim = state.error_dim();
        if cov.nrows() != dim || cov.ncols() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: cov.nrows() });
        }
        Ok(Self {
            state,
            cov,
            config,
            stats: FilterStats::default(),
            fresh: Vec::new(),
            last_gyro: Vector3::zeros(),
        })
    }

    /// Starts from a slot-free state with the configured initial covariance
    /// and adds slots for the legs in contact in `kin`.
    pub fn from_kinematics(state: RobotState, kin: &KinSample, model: &RobotModel, config: FilterConfig) -> Result<Self> {
        let cov = config.base_covariance();
        let mut f = Self::new(state, cov, config)?;
        for leg in 0..kin.num_legs() {
            if kin.contacts[leg] {
                let q = kin.leg_q(leg);
                let l = &model.legs[leg];
                f.on_contact_change(leg, true, &fk(l, &q), &fk_jacobian(l, &q))?;
            }
        }
        f.fresh.clear();
        Ok(f)
    }

    pub fn predict(&mut self, imu: &ImuSample, dt: f64) -> Result<()> {
        if !(dt > 0.0 && dt <= 0.1) {
            return Err(Error::InvalidTimeStep(dt));
        }
        let scale = vec![1.0; self.state.num_slots()];
        let sm = system_matrices(&self.state, &self.config.noise, dt, &scale)?;
        let (phi, next) = error_transition(&self.state, imu, dt, &self.config.noise.gravity)?;
        let mut p = &phi * &self.cov * phi.transpose() + sm.qd;
        symmetrize(&mut p);
        self.cov = p;
        self.state = next;
        self.last_gyro = imu.gyro;
        self.stats.predictions += 1;
        Ok(())
    }

    /// Innovation covariance `H P Hᵀ + N`.
    pub fn innovation_covariance(&self, h: &DMatrix<f64>, noise: &DMatrix<f64>) -> DMatrix<f64> {
        h * &self.cov * h.transpose() + noise
    }

    /// Mahalanobis gate on a single block.
    pub fn gate(&self, innovation: &Vector3<f64>, s: &Matrix3<f64>) -> bool {
        gate(innovation, s, self.config.chi2_threshold)
    }

    /// Joseph-form update with `X̄⁺ = Exp(K z)·X̄`, `b⁺ = b̄ + (K z)_ζ`.
    pub fn update(&mut self, obs: &StackedObservation) -> Result<UpdateOutcome> {
        let dim = self.state.error_dim();
        if obs.h.ncols() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: obs.h.ncols() });
        }
        let s = self.innovation_covariance(&obs.h, &obs.noise);
        let chol = s.cholesky();
        let condition = chol.as_ref().map_or(f64::INFINITY, |c| cholesky_condition(c.l_dirty()));
        let chol = match chol {
            Some(c) if condition <= self.config.max_condition => c,
            _ => {
                self.stats.skipped_updates += 1;
                return Ok(UpdateOutcome::Skipped { condition });
            }
        };
        let ph_t = &self.cov * obs.h.transpose();
        let k = chol.solve(&ph_t.transpose()).transpose();
        let delta = StateError::from_vector(&(&k * &obs.innovation))?;
        self.state = retract(&self.state, &delta)?;
        let ikh = DMatrix::identity(dim, dim) - &k * &obs.h;
        let mut p = &ikh * &self.cov * ikh.transpose() + &k * &obs.noise * k.transpose();
        symmetrize(&mut p);
        self.cov = p;
        self.stats.updates += 1;
        Ok(UpdateOutcome::Applied)
    }

    /// Adds or removes the contact slot of `leg`.
    pub fn on_contact_change(&mut self, leg: usize, in_contact: bool, fk: &Vector3<f64>, jp: &Matrix3<f64>) -> Result<()> {
        if leg >= self.state.num_legs() {
            return Err(Error::InvalidLeg(leg));
        }
        if in_contact {
            let d = self.state.position() + self.state.rotation() * fk;
            let rj = self.state.rotation() * jp;
            let noise = rj * self.config.joint_covariance() * rj.transpose();
            let slot = self.state.add_contact(leg, d)?;
            self.cov = augment_covariance(&self.cov, self.state.slot_offset(slot), &noise);
            self.fresh.push(leg);
        } else {
            let slot = self.state.remove_contact(leg)?;
            self.cov = remove_block(&self.cov, 9 + 3 * slot);
            self.fresh.retain(|&l| l != leg);
        }
        Ok(())
    }

    /// Applies touchdown/liftoff transitions from `kin` and returns the
    /// kinematic blocks of tracked stance legs, excluding slots created from
    /// this very sample.
    pub fn kinematic_blocks(&mut self, kin: &KinSample, model: &RobotModel) -> Result<Vec<ObservationBlock>> {
        kin.validate()?;
        if kin.num_legs() != self.state.num_legs() || model.num_legs() != kin.num_legs() {
            return Err(Error::Data("leg count mismatch between model, state and sample".into()));
        }
        self.fresh.clear();
        for leg in 0..kin.num_legs() {
            let tracked = self.state.slot_of_leg(leg).is_some();
            if tracked != kin.contacts[leg] {
                let q = kin.leg_q(leg);
                let l = &model.legs[leg];
                self.on_contact_change(leg, kin.contacts[leg], &fk(l, &q), &fk_jacobian(l, &q))?;
            }
        }
        let omega = self.last_gyro - self.state.gyro_bias();
        let body_vel = self.state.rotation().transpose() * self.state.velocity();
        let joint_cov = self.config.joint_covariance();
        let mut blocks = Vec::new();
        for leg in 0..kin.num_legs() {
            if !kin.contacts[leg] || self.fresh.contains(&leg) {
                continue;
            }
            let l = &model.legs[leg];
            let q = kin.leg_q(leg);
            let factor = slip_check(
                l,
                &q,
                &kin.leg_qdot(leg),
                &omega,
                &body_vel,
                true,
                self.config.slip_threshold,
                self.config.slip_inflation_max,
            );
            if factor > 1.0 {
                self.stats.slip_inflations += 1;
            }
            let jp = fk_jacobian(l, &q);
            blocks.push(kinematic_block(&self.state, &fk(l, &q), &jp, &(joint_cov * factor), leg)?);
        }
        Ok(blocks)
    }

    /// Gates and converts fixes into blocks; rejected or stale fixes are
    /// counted and dropped.
    pub fn fix_blocks(&mut self, lidar: &[OdomFix], gps: &[GpsFix]) -> Result<Vec<ObservationBlock>> {
        let mut out = Vec::new();
        let cfg = self.config.clone();
        for fix in lidar {
            match lidar_block(&self.state, fix, cfg.max_fix_age, cfg.position_jacobian) {
                Ok(b) => {
                    if self.block_passes_gate(&b) {
                        self.stats.lidar_accepted += 1;
                        out.push(b);
                    } else {
                        self.stats.lidar_rejected += 1;
                    }
                }
                Err(Error::StaleFix { .. }) => self.stats.stale_fixes += 1,
                Err(e) => return Err(e),
            }
        }
        for fix in gps {
            match gps_block(&self.state, fix, cfg.max_fix_age, cfg.position_jacobian) {
                Ok(b) => {
                    if self.block_passes_gate(&b) {
                        self.stats.gps_accepted += 1;
                        out.push(b);
                    } else {
                        self.stats.gps_rejected += 1;
                    }
                }
                Err(Error::StaleFix { .. }) => self.stats.stale_fixes += 1,
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    fn block_passes_gate(&self, b: &ObservationBlock) -> bool {
        let s = &b.h * &self.cov * b.h.transpose();
        let s = Matrix3::from_iterator(s.iter().copied()) + b.noise;
        self.gate(&b.innovation, &s)
    }

    /// One measurement tick: kinematics from `kin` (if any) plus the given
    /// fixes, stacked into a single update.
    pub fn correct(&mut self, kin: Option<&KinSample>, model: &RobotModel, lidar: &[OdomFix], gps: &[GpsFix]) -> Result<Option<UpdateOutcome>> {
        let mut blocks = match kin {
            Some(k) => self.kinematic_blocks(k, model)?,
            None => Vec::new(),
        };
        blocks.extend(self.fix_blocks(lidar, gps)?);
        if blocks.is_empty() {
            return Ok(None);
        }
        let stacked = stack_blocks(blocks)?;
        self.update(&stacked).map(Some)
    }

    /// Covariance of the 15-dim base error `(phi, v, p, b_g, b_a)`.
    pub fn base_covariance(&self) -> DMatrix<f64> {
        let bo = self.state.bias_offset();
        let idx: Vec<usize> = (0..9).chain(bo..bo + 6).collect();
        DMatrix::from_fn(15, 15, |i, j| self.cov[(idx[i], idx[j])])
    }
}

pub fn gate(innovation: &Vector3<f64>, s: &Matrix3<f64>, threshold: f64) -> bool {
    match s.cholesky() {
        Some(c) => innovation.dot(&c.solve(innovation)) < threshold,
        None => false,
    }
}

/// Condition estimate from a Cholesky factor: squared ratio of the extreme
/// pivots. A lower bound on the true 2-norm condition number.
pub fn cholesky_condition(l: &DMatrix<f64>) -> f64 {
    let d = l.diagonal();
    let (min, max) = (d.min(), d.max());
    if min <= 0.0 {
        f64::INFINITY
    } else {
        (max / min).powi(2)
    }
}
