//! Fixed-lag invariant smoother.
//!
//! Keyframes are created every `decimation` IMU samples. Consecutive
//! keyframes are tied by a propagation factor built from the raw IMU
//! samples between them; each keyframe carries kinematic and position-fix
//! factors. Residuals live in the same invariant coordinates as the filter
//! (`X = Exp(xi)·X̄`, `b = b̄ + zeta`), the window is solved by Gauss–Newton
//! and the oldest keyframe is folded into a Gaussian prior by a Schur
//! complement once the window exceeds its size.
//!
//! Every keyframe carries one foot slot per leg. A foot that leaves the
//! ground during an interval gets inflated process noise and its operating
//! point is re-initialized from kinematics at the next keyframe.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    adjoint_times, error_transition, symmetrize, system_matrices,
    NoiseParams,
};
use crate::error::{Error, Result};
use crate::inekf::{augment_covariance, gate, FilterConfig};
use crate::kinematics::{fk, fk_jacobian, slip_check, RobotModel};
use crate::lie::{adjoint, hat, orthonormalize, right_jacobian, sek3_left_jacobian_inv, sek3_log, so3_exp, GroupElement};
use crate::observations::ObservationKind;
use crate::state::{right_invariant_error, GpsFix, ImuSample, KinSample, OdomFix, RobotState, FOOT0, POS, VEL};

/// Variance floor (m²) added to kinematic factor covariances so that a
/// rank-deficient leg Jacobian still yields a usable whitening.
const KINEMATIC_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmootherConfig {
    /// Noise, initial covariance, gating and slip settings shared with the filter.
    pub filter: FilterConfig,
    /// Number of keyframes kept after marginalization (WS).
    pub window: usize,
    /// IMU samples per keyframe.
    pub decimation: usize,
    pub max_iters: usize,
    /// Gauss–Newton stops once `‖δ‖∞` drops below this.
    pub tolerance: f64,
    /// Variance (m²) of the weak tie between the base and a foot slot that
    /// is not in contact, and of such a slot at start-up.
    pub swing_foot_variance: f64,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        Self {
            filter: FilterConfig::default(),
            window: 15,
            decimation: 10,
            max_iters: 10,
            tolerance: 1e-4,
            swing_foot_variance: 1.0,
        }
    }
}

impl SmootherConfig {
    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        if self.window == 0 || self.decimation == 0 || self.max_iters == 0 {
            return Err(Error::Config("window, decimation and max_iters must be at least 1".into()));
        }
        let n = &self.filter.noise;
        if [n.gyro, n.accel, n.contact, n.gyro_bias, n.accel_bias].iter().any(|s| *s <= 0.0) {
            return Err(Error::Config("the smoother needs strictly positive noise densities".into()));
        }
        if !(self.tolerance > 0.0) || !(self.swing_foot_variance > 0.0) {
            return Err(Error::Config("invalid smoother tolerance or swing settings".into()));
        }
        Ok(())
    }
}

/// One raw IMU sample together with the step it drives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuStep {
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
    pub dt: f64,
}

/// Body-frame increment `Υ` over a keyframe interval and its right
/// derivative with respect to the bias.
#[derive(Clone, Debug)]
pub struct Preintegrated {
    /// `(ΔR, Δv, Δp)`.
    pub delta: GroupElement,
    /// `9 × 6`: `Υ(b̄ + ζ) ≈ Υ(b̄)·Exp(D ζ)`.
    pub bias_jacobian: DMatrix<f64>,
    pub duration: f64,
}

/// Composes the per-sample increments with `Υ ← Φ_dt(Υ)·Υ_k`.
pub fn preintegrate(steps: &[ImuStep], bias: &Vector6<f64>) -> Preintegrated {
    let bg = bias.fixed_rows::<3>(0).into_owned();
    let ba = bias.fixed_rows::<3>(3).into_owned();
    let (mut dr, mut dv, mut dp) = (Matrix3::identity(), Vector3::zeros(), Vector3::zeros());
    let mut d = SMatrix::<f64, 9, 6>::zeros();
    let mut duration = 0.0;
    for s in steps {
        let dt = s.dt;
        let w_dt = (s.gyro - bg) * dt;
        let a = s.accel - ba;
        let rk = so3_exp(&w_dt);
        let rkt = rk.transpose();

        // Φ_dt, then Ad of the inverse sample increment, plus its own bias term.
        let v_rows = d.fixed_rows::<3>(3).into_owned();
        let p_rows = d.fixed_rows::<3>(6) + v_rows * dt;
        let top = rkt * d.fixed_rows::<3>(0);
        let mid = hat(&(-(rkt * a) * dt)) * top + rkt * v_rows;
        let bot = hat(&(-(rkt * a) * (0.5 * dt * dt))) * top + rkt * p_rows;
        d.fixed_rows_mut::<3>(0).copy_from(&top);
        d.fixed_rows_mut::<3>(3).copy_from(&mid);
        d.fixed_rows_mut::<3>(6).copy_from(&bot);
        let mut b = d.fixed_view_mut::<3, 3>(0, 0);
        b -= right_jacobian(&w_dt) * dt;
        let mut b = d.fixed_view_mut::<3, 3>(3, 3);
        b -= rkt * dt;
        let mut b = d.fixed_view_mut::<3, 3>(6, 3);
        b -= rkt * (0.5 * dt * dt);

        dp += dv * dt + dr * a * (0.5 * dt * dt);
        dv += dr * a * dt;
        dr *= rk;
        duration += dt;
    }
    Preintegrated {
        delta: GroupElement::new(orthonormalize(&dr), vec![dv, dp]),
        bias_jacobian: DMatrix::from_column_slice(9, 6, d.as_slice()),
        duration,
    }
}

/// `A·B` for `(3+3k)`-square matrices whose non-zero 3×3 blocks sit only on
/// the block diagonal and in the first block column.
fn arrow_mul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let blk = |m: &DMatrix<f64>, i: usize, j: usize| m.fixed_view::<3, 3>(3 * i, 3 * j).into_owned();
    let mut c = DMatrix::zeros(n, n);
    c.fixed_view_mut::<3, 3>(0, 0).copy_from(&(blk(a, 0, 0) * blk(b, 0, 0)));
    for i in 1..n / 3 {
        c.fixed_view_mut::<3, 3>(3 * i, 0)
            .copy_from(&(blk(a, i, 0) * blk(b, 0, 0) + blk(a, i, i) * blk(b, i, 0)));
        c.fixed_view_mut::<3, 3>(3 * i, 3 * i).copy_from(&(blk(a, i, i) * blk(b, i, i)));
    }
    c
}

/// `J⁻¹·pose_transition(g, t)` using the arrow structure of `J⁻¹`.
fn jinv_times_transition(jinv: &DMatrix<f64>, gravity: &Vector3<f64>, t: f64) -> DMatrix<f64> {
    let mut c = jinv.clone();
    let j11 = jinv.fixed_view::<3, 3>(3, 3).into_owned();
    let j22 = jinv.fixed_view::<3, 3>(6, 6).into_owned();
    let mut b = c.fixed_view_mut::<3, 3>(3, 0);
    b += j11 * hat(gravity) * t;
    let mut b = c.fixed_view_mut::<3, 3>(6, 0);
    b += j22 * hat(gravity) * (0.5 * t * t);
    let mut b = c.fixed_view_mut::<3, 3>(6, 3);
    b += j22 * t;
    c
}

/// `X_{j+1} = Γ_T·Φ_T(X_j)·Υ`: feet and bias carried over.
pub fn predict_keyframe(x: &RobotState, pre: &Preintegrated, gravity: &Vector3<f64>) -> RobotState {
    let t = pre.duration;
    let r = *x.rotation();
    let v = *x.velocity();
    let p = *x.position();
    let mut out = x.clone();
    out.pose.set_rotation(orthonormalize(&(r * pre.delta.rotation())));
    *out.pose.column_mut(VEL) = v + gravity * t + r * pre.delta.column(0);
    *out.pose.column_mut(POS) = p + v * t + gravity * (0.5 * t * t) + r * pre.delta.column(1);
    out.stamp = x.stamp + t;
    out
}

/// Residual and Jacobians of a two-state factor.
#[derive(Clone, Debug)]
pub struct Linearized {
    pub residual: DVector<f64>,
    pub jac_from: DMatrix<f64>,
    pub jac_to: DMatrix<f64>,
}

/// `r = [Log(f(X_j)·X_{j+1}⁻¹); b_j - b_{j+1}]`.
pub fn propagation_residual(from: &RobotState, to: &RobotState, steps: &[ImuStep], gravity: &Vector3<f64>) -> Result<DVector<f64>> {
    check_pair(from, to)?;
    let pre = preintegrate(steps, &from.bias);
    let f = predict_keyframe(from, &pre, gravity);
    let xi = sek3_log(&f.pose.compose(&to.pose.inverse()));
    Ok(stack_error(&xi.to_vector(), &(from.bias - to.bias)))
}

/// Residual plus exact Jacobians:
/// `∂r/∂(ξ_j, ζ_j) = [J_l⁻¹ F_T, J_l⁻¹ Ad_f D; 0, I]` and
/// `∂r/∂(ξ_{j+1}, ζ_{j+1}) = [-J_l⁻¹ Ad_E, 0; 0, -I]`.
pub fn propagation_linearize(from: &RobotState, to: &RobotState, steps: &[ImuStep], gravity: &Vector3<f64>) -> Result<Linearized> {
    check_pair(from, to)?;
    let pre = preintegrate(steps, &from.bias);
    let f = predict_keyframe(from, &pre, gravity);
    let e = f.pose.compose(&to.pose.inverse());
    let xi = sek3_log(&e);
    let jinv = sek3_left_jacobian_inv(&xi);
    let k = from.pose.k();
    let n = 3 + 3 * k;
    let dim = n + 6;

    let mut d = DMatrix::zeros(n, 6);
    d.rows_mut(0, 9).copy_from(&pre.bias_jacobian);
    let mut jac_from = DMatrix::zeros(dim, dim);
    jac_from
        .view_mut((0, 0), (n, n))
        .copy_from(&jinv_times_transition(&jinv, gravity, pre.duration));
    jac_from.view_mut((0, n), (n, 6)).copy_from(&(&jinv * adjoint_times(&f.pose, &d)));
    jac_from.view_mut((n, n), (6, 6)).fill_with_identity();

    let mut jac_to = DMatrix::zeros(dim, dim);
    jac_to.view_mut((0, 0), (n, n)).copy_from(&(-arrow_mul(&jinv, &adjoint(&e))));
    jac_to.view_mut((n, n), (6, 6)).copy_from(&(-DMatrix::<f64>::identity(6, 6)));

    Ok(Linearized {
        residual: stack_error(&xi.to_vector(), &(from.bias - to.bias)),
        jac_from,
        jac_to,
    })
}

fn check_pair(from: &RobotState, to: &RobotState) -> Result<()> {
    if from.slot_legs != to.slot_legs {
        return Err(Error::SlotMismatch);
    }
    Ok(())
}

fn stack_error(xi: &DVector<f64>, zeta: &Vector6<f64>) -> DVector<f64> {
    let n = xi.len();
    let mut out = DVector::zeros(n + 6);
    out.rows_mut(0, n).copy_from(xi);
    out.fixed_rows_mut::<6>(n).copy_from(zeta);
    out
}

/// Covariance of the propagation residual: the filter recursion
/// `Σ ← Φ Σ Φᵀ + Q_d` run from zero along the predicted mean.
pub fn propagation_covariance(
    from: &RobotState,
    steps: &[ImuStep],
    noise: &NoiseParams,
    contact_scale: &[f64],
) -> Result<DMatrix<f64>> {
    let dim = from.error_dim();
    let mut sigma = DMatrix::zeros(dim, dim);
    let mut state = from.clone();
    for s in steps {
        let imu = ImuSample { stamp: state.stamp, gyro: s.gyro, accel: s.accel };
        let sm = system_matrices(&state, noise, s.dt, contact_scale)?;
        let (phi, next) = error_transition(&state, &imu, s.dt, &noise.gravity)?;
        sigma = &phi * &sigma * phi.transpose() + sm.qd;
        state = next;
    }
    symmetrize(&mut sigma);
    Ok(sigma)
}

/// `L⁻¹` for `Σ = L Lᵀ`.
fn whitener(cov: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let l = cov.clone().cholesky().ok_or(Error::NotPositiveDefinite(what))?.l();
    let n = l.nrows();
    l.solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or(Error::NotPositiveDefinite(what))
}

#[derive(Clone, Debug)]
pub struct PropagationFactor {
    pub steps: Vec<ImuStep>,
    pub covariance: DMatrix<f64>,
    sqrt_info: DMatrix<f64>,
}

impl PropagationFactor {
    pub fn new(from: &RobotState, steps: Vec<ImuStep>, noise: &NoiseParams, contact_scale: &[f64]) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Data("propagation factor without IMU samples".into()));
        }
        let covariance = propagation_covariance(from, &steps, noise, contact_scale)?;
        let sqrt_info = whitener(&covariance, "propagation covariance")?;
        Ok(Self { steps, covariance, sqrt_info })
    }

    /// Drops the residual rows of the given foot slots by marginalizing
    /// them out of the factor. Used for feet that left the ground during
    /// the interval, whose displacement the factor cannot predict.
    pub fn release_slots(mut self, from: &RobotState, slots: &[usize]) -> Result<Self> {
        if slots.is_empty() {
            return Ok(self);
        }
        let dim = self.covariance.nrows();
        let mut free = vec![false; dim];
        for &slot in slots {
            if slot >= from.num_slots() {
                return Err(Error::Data(format!("foot slot {slot} out of range")));
            }
            let o = from.slot_offset(slot);
            free[o..o + 3].iter_mut().for_each(|f| *f = true);
        }
        let kept: Vec<usize> = (0..dim).filter(|&i| !free[i]).collect();
        let sub = self.covariance.select_rows(&kept).select_columns(&kept);
        let w = whitener(&sub, "propagation covariance")?;
        let mut sqrt_info = DMatrix::zeros(kept.len(), dim);
        for (c, &k) in kept.iter().enumerate() {
            sqrt_info.column_mut(k).copy_from(&w.column(c));
        }
        self.sqrt_info = sqrt_info;
        Ok(self)
    }

    pub fn duration(&self) -> f64 {
        self.steps.iter().map(|s| s.dt).sum()
    }
}

/// Three-row observation factor `r(Exp(ξ)X̄) ≈ r + J ξ`.
#[derive(Clone, Debug)]
pub struct ObsFactor {
    pub residual: Vector3<f64>,
    /// `3 × dim`.
    pub jacobian: DMatrix<f64>,
    pub covariance: Matrix3<f64>,
}

fn foot_relation(x: &RobotState, fk: &Vector3<f64>, leg: usize) -> Result<(Vector3<f64>, DMatrix<f64>)> {
    if leg >= x.num_legs() {
        return Err(Error::InvalidLeg(leg));
    }
    let slot = x.slot_of_leg(leg).ok_or(Error::ContactNotTracked(leg))?;
    let residual = x.rotation() * fk + x.position() - x.foot(slot);
    let mut jacobian = DMatrix::zeros(3, x.error_dim());
    jacobian.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-hat(&residual)));
    jacobian.fixed_view_mut::<3, 3>(0, 6).fill_with_identity();
    jacobian
        .fixed_view_mut::<3, 3>(0, x.slot_offset(slot))
        .copy_from(&(-Matrix3::identity()));
    Ok((residual, jacobian))
}

/// `r = R fk + p - d_leg`, `J = [-r^, 0, I, .., -I, .., 0₆]`,
/// `Σ = R J_p Σ_q J_pᵀ Rᵀ`.
pub fn kinematic_factor(
    x: &RobotState,
    fk: &Vector3<f64>,
    jp: &Matrix3<f64>,
    joint_cov: &Matrix3<f64>,
    leg: usize,
) -> Result<ObsFactor> {
    if leg >= x.num_legs() {
        return Err(Error::InvalidLeg(leg));
    }
    if !x.contacts[leg] {
        return Err(Error::SwingLeg(leg));
    }
    let (residual, jacobian) = foot_relation(x, fk, leg)?;
    let rj = x.rotation() * jp;
    Ok(ObsFactor {
        residual,
        jacobian,
        covariance: rj * joint_cov * rj.transpose(),
    })
}

/// `r = p - p_fix`, `J = [-p^, 0, I, 0]`, `Σ = Σ_fix`.
pub fn position_factor(x: &RobotState, position: &Vector3<f64>, covariance: &Matrix3<f64>) -> ObsFactor {
    let mut jacobian = DMatrix::zeros(3, x.error_dim());
    jacobian.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-hat(x.position())));
    jacobian.fixed_view_mut::<3, 3>(0, 6).fill_with_identity();
    ObsFactor {
        residual: x.position() - position,
        jacobian,
        covariance: *covariance,
    }
}

pub fn lidar_factor(x: &RobotState, fix: &OdomFix) -> ObsFactor {
    position_factor(x, &fix.position, &fix.covariance)
}

pub fn gps_factor(x: &RobotState, fix: &GpsFix) -> ObsFactor {
    position_factor(x, &fix.position, &fix.covariance)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KinematicObservation {
    pub leg: usize,
    pub fk: Vector3<f64>,
    pub jp: Matrix3<f64>,
    /// Joint covariance including any slip inflation.
    pub joint_cov: Matrix3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixObservation {
    pub kind: ObservationKind,
    pub stamp: f64,
    pub position: Vector3<f64>,
    pub covariance: Matrix3<f64>,
}

/// Weak tie `R fk + p - d_leg ~ N(0, variance·I)` that keeps the slot of
/// an airborne foot determined.
#[derive(Clone, Debug, PartialEq)]
pub struct SwingObservation {
    pub leg: usize,
    pub fk: Vector3<f64>,
    pub variance: f64,
}

#[derive(Clone, Debug)]
pub struct Keyframe {
    pub state: RobotState,
    pub kinematics: Vec<KinematicObservation>,
    pub swing: Vec<SwingObservation>,
    pub fixes: Vec<FixObservation>,
}

impl Keyframe {
    pub fn new(state: RobotState) -> Self {
        Self {
            state,
            kinematics: Vec::new(),
            swing: Vec::new(),
            fixes: Vec::new(),
        }
    }

    fn factors(&self) -> Result<Vec<ObsFactor>> {
        let mut out = Vec::with_capacity(self.kinematics.len() + self.fixes.len());
        for k in &self.kinematics {
            let mut f = kinematic_factor(&self.state, &k.fk, &k.jp, &k.joint_cov, k.leg)?;
            f.covariance += Matrix3::identity() * KINEMATIC_FLOOR;
            out.push(f);
        }
        for s in &self.swing {
            let (residual, jacobian) = foot_relation(&self.state, &s.fk, s.leg)?;
            out.push(ObsFactor { residual, jacobian, covariance: Matrix3::identity() * s.variance });
        }
        for fix in &self.fixes {
            out.push(position_factor(&self.state, &fix.position, &fix.covariance));
        }
        Ok(out)
    }
}

fn constrained_dims(info: &DMatrix<f64>) -> Vec<usize> {
    (0..info.nrows()).filter(|&i| info.row(i).iter().any(|v| *v != 0.0)).collect()
}

/// Gaussian prior `½‖U(e - m)‖²` on the oldest keyframe, with
/// `e = [Log(X·X_lin⁻¹); b - b_lin]`.
#[derive(Clone, Debug)]
pub struct Prior {
    pub linearization: RobotState,
    pub mean: DVector<f64>,
    /// Upper-triangular square root of the information matrix.
    pub sqrt_info: DMatrix<f64>,
}

impl Prior {
    pub fn from_covariance(state: &RobotState, cov: &DMatrix<f64>) -> Result<Self> {
        let dim = state.error_dim();
        if cov.nrows() != dim || cov.ncols() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: cov.nrows() });
        }
        let info = cov
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("prior covariance"))?
            .inverse();
        Self::from_information(state, &info, &DVector::zeros(dim))
    }

    /// Prior with information `Λ` and mean `m` in the tangent space at `state`.
    /// Dimensions whose row of `Λ` is exactly zero (released foot slots)
    /// stay unconstrained; the rest must be positive definite.
    pub fn from_information(state: &RobotState, info: &DMatrix<f64>, mean: &DVector<f64>) -> Result<Self> {
        let mut info = info.clone();
        symmetrize(&mut info);
        let kept = constrained_dims(&info);
        let sub = info.select_rows(&kept).select_columns(&kept);
        let u = sub.cholesky().ok_or(Error::NotPositiveDefinite("prior information"))?.l().transpose();
        let mut sqrt_info = DMatrix::zeros(kept.len(), info.ncols());
        for (c, &k) in kept.iter().enumerate() {
            sqrt_info.column_mut(k).copy_from(&u.column(c));
        }
        Ok(Self {
            linearization: state.clone(),
            mean: mean.clone(),
            sqrt_info,
        })
    }

    pub fn residual(&self, x: &RobotState) -> Result<DVector<f64>> {
        let e = right_invariant_error(x, &self.linearization)?;
        Ok(&self.sqrt_info * (e.to_vector() - &self.mean))
    }

    pub fn linearize(&self, x: &RobotState) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let e = right_invariant_error(x, &self.linearization)?;
        let n = e.xi.dim();
        let mut j = DMatrix::identity(n + 6, n + 6);
        j.view_mut((0, 0), (n, n)).copy_from(&sek3_left_jacobian_inv(&e.xi));
        Ok((&self.sqrt_info * (e.to_vector() - &self.mean), &self.sqrt_info * j))
    }

    pub fn information(&self) -> DMatrix<f64> {
        self.sqrt_info.transpose() * &self.sqrt_info
    }
}

/// Block-tridiagonal normal equations `H δ = -g` of a window.
#[derive(Clone, Debug)]
pub struct NormalEquations {
    pub diag: Vec<DMatrix<f64>>,
    /// `off[i] = H_{i,i+1}`.
    pub off: Vec<DMatrix<f64>>,
    pub grad: Vec<DVector<f64>>,
    pub cost: f64,
}

impl NormalEquations {
    fn zeros(states: usize, dim: usize) -> Self {
        Self {
            diag: vec![DMatrix::zeros(dim, dim); states],
            off: vec![DMatrix::zeros(dim, dim); states.saturating_sub(1)],
            grad: vec![DVector::zeros(dim); states],
            cost: 0.0,
        }
    }

    /// Solves `H δ = -g` by block Cholesky. Also returns the Schur
    /// complement of the last block (its marginal information).
    pub fn solve(&self) -> Result<(Vec<DVector<f64>>, DMatrix<f64>)> {
        let n = self.diag.len();
        let mut chols = Vec::with_capacity(n);
        let mut ys: Vec<DVector<f64>> = Vec::with_capacity(n);
        let mut s = self.diag[0].clone();
        let mut y = -&self.grad[0];
        for i in 0..n {
            let c = s.clone().cholesky().ok_or(Error::SingularSystem)?;
            if i + 1 < n {
                // With S = L Lᵀ: Bᵀ S⁻¹ B = (L⁻¹B)ᵀ(L⁻¹B).
                let l = c.l_dirty();
                let w = l.solve_lower_triangular(&self.off[i]).ok_or(Error::SingularSystem)?;
                let z = l.solve_lower_triangular(&y).ok_or(Error::SingularSystem)?;
                let wt = w.transpose();
                let mut next_s = self.diag[i + 1].clone();
                next_s.gemm(-1.0, &wt, &w, 1.0);
                let mut next_y = -&self.grad[i + 1];
                next_y.gemv(-1.0, &wt, &z, 1.0);
                chols.push(c);
                ys.push(y);
                s = next_s;
                y = next_y;
            } else {
                chols.push(c);
                ys.push(y.clone());
            }
        }
        let mut delta = vec![DVector::zeros(0); n];
        delta[n - 1] = chols[n - 1].solve(&ys[n - 1]);
        for i in (0..n - 1).rev() {
            let rhs = &ys[i] - &self.off[i] * &delta[i + 1];
            delta[i] = chols[i].solve(&rhs);
        }
        Ok((delta, s))
    }

    /// Marginal information of every block: the Schur complements from
    /// both ends combined as `S_i + T_i - H_ii`.
    pub fn marginal_informations(&self) -> Result<Vec<DMatrix<f64>>> {
        let n = self.diag.len();
        let mut left = vec![self.diag[0].clone()];
        for i in 0..n - 1 {
            let c = left[i].clone().cholesky().ok_or(Error::SingularSystem)?;
            left.push(&self.diag[i + 1] - self.off[i].transpose() * c.solve(&self.off[i]));
        }
        let mut right = vec![DMatrix::zeros(0, 0); n];
        right[n - 1] = self.diag[n - 1].clone();
        for i in (0..n - 1).rev() {
            let c = right[i + 1].clone().cholesky().ok_or(Error::SingularSystem)?;
            right[i] = &self.diag[i] - &self.off[i] * c.solve(&self.off[i].transpose());
        }
        Ok((0..n).map(|i| &left[i] + &right[i] - &self.diag[i]).collect())
    }

    /// Marginal information of the first block (one backward sweep).
    pub fn first_marginal_information(&self) -> Result<DMatrix<f64>> {
        let n = self.diag.len();
        let mut right = self.diag[n - 1].clone();
        for i in (0..n - 1).rev() {
            let c = right.cholesky().ok_or(Error::SingularSystem)?;
            right = &self.diag[i] - &self.off[i] * c.solve(&self.off[i].transpose());
        }
        Ok(right)
    }

    /// The full `H` as a dense matrix.
    pub fn dense_hessian(&self) -> DMatrix<f64> {
        let n = self.diag.len();
        let d = self.diag[0].nrows();
        let mut h = DMatrix::zeros(n * d, n * d);
        for i in 0..n {
            h.view_mut((i * d, i * d), (d, d)).copy_from(&self.diag[i]);
            if i + 1 < n {
                h.view_mut((i * d, (i + 1) * d), (d, d)).copy_from(&self.off[i]);
                h.view_mut(((i + 1) * d, i * d), (d, d)).copy_from(&self.off[i].transpose());
            }
        }
        h
    }
}

/// A whitened factor touching one or two consecutive states.
struct Whitened {
    residual: DVector<f64>,
    blocks: Vec<(usize, DMatrix<f64>)>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// The last step increased the cost and was undone.
    pub rejected_step: bool,
    pub max_step: f64,
}

/// The window of keyframes, the propagation factors between them and the
/// prior on the oldest one.
#[derive(Clone, Debug)]
pub struct SmootherWindow {
    pub keyframes: Vec<Keyframe>,
    /// `propagation[i]` links keyframes `i` and `i + 1`.
    pub propagation: Vec<PropagationFactor>,
    pub prior: Prior,
    pub gravity: Vector3<f64>,
}

impl SmootherWindow {
    pub fn new(first: Keyframe, prior: Prior, gravity: Vector3<f64>) -> Self {
        Self {
            keyframes: vec![first],
            propagation: Vec::new(),
            prior,
            gravity,
        }
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.keyframes[0].state.error_dim()
    }

    pub fn push(&mut self, factor: PropagationFactor, keyframe: Keyframe) {
        self.propagation.push(factor);
        self.keyframes.push(keyframe);
    }

    fn whitened_factors(&self, with_jacobians: bool, only_first: bool) -> Result<Vec<Whitened>> {
        let mut out = Vec::new();
        let first = &self.keyframes[0].state;
        if with_jacobians {
            let (r, j) = self.prior.linearize(first)?;
            out.push(Whitened { residual: r, blocks: vec![(0, j)] });
        } else {
            out.push(Whitened { residual: self.prior.residual(first)?, blocks: Vec::new() });
        }
        let last_prop = if only_first { self.propagation.len().min(1) } else { self.propagation.len() };
        for (i, f) in self.propagation.iter().enumerate().take(last_prop) {
            let (a, b) = (&self.keyframes[i].state, &self.keyframes[i + 1].state);
            if with_jacobians {
                let lin = propagation_linearize(a, b, &f.steps, &self.gravity)?;
                out.push(Whitened {
                    residual: &f.sqrt_info * lin.residual,
                    blocks: vec![(i, &f.sqrt_info * lin.jac_from), (i + 1, &f.sqrt_info * lin.jac_to)],
                });
            } else {
                out.push(Whitened {
                    residual: &f.sqrt_info * propagation_residual(a, b, &f.steps, &self.gravity)?,
                    blocks: Vec::new(),
                });
            }
        }
        let last_kf = if only_first { 1 } else { self.keyframes.len() };
        for (i, kf) in self.keyframes.iter().enumerate().take(last_kf) {
            for f in kf.factors()? {
                let l = f.covariance.cholesky().ok_or(Error::NotPositiveDefinite("observation covariance"))?.l();
                let w = l.try_inverse().ok_or(Error::NotPositiveDefinite("observation covariance"))?;
                let residual = DVector::from_column_slice((w * f.residual).as_slice());
                let blocks = if with_jacobians {
                    let wd = DMatrix::from_column_slice(3, 3, w.as_slice());
                    vec![(i, wd * f.jacobian)]
                } else {
                    Vec::new()
                };
                out.push(Whitened { residual, blocks });
            }
        }
        Ok(out)
    }

    /// `½ Σ ‖r_w‖²` over all factors.
    pub fn cost(&self) -> Result<f64> {
        Ok(self
            .whitened_factors(false, false)?
            .iter()
            .map(|w| 0.5 * w.residual.norm_squared())
            .sum())
    }

    fn accumulate(states: usize, dim: usize, factors: &[Whitened]) -> NormalEquations {
        let mut ne = NormalEquations::zeros(states, dim);
        for w in factors {
            ne.cost += 0.5 * w.residual.norm_squared();
            for (a, ja) in &w.blocks {
                // Explicit transpose so the products go through the blocked gemm.
                let jat = ja.transpose();
                ne.grad[*a].gemv(1.0, &jat, &w.residual, 1.0);
                for (b, jb) in &w.blocks {
                    if a == b {
                        ne.diag[*a].gemm(1.0, &jat, jb, 1.0);
                    } else if *b == a + 1 {
                        ne.off[*a].gemm(1.0, &jat, jb, 1.0);
                    }
                }
            }
        }
        ne
    }

    pub fn normal_equations(&self) -> Result<NormalEquations> {
        let factors = self.whitened_factors(true, false)?;
        Ok(Self::accumulate(self.len(), self.dim(), &factors))
    }

    /// Whitened stacked Jacobian and residual over the whole window.
    pub fn dense_system(&self) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let factors = self.whitened_factors(true, false)?;
        let d = self.dim();
        let rows: usize = factors.iter().map(|w| w.residual.len()).sum();
        let mut j = DMatrix::zeros(rows, d * self.len());
        let mut r = DVector::zeros(rows);
        let mut row = 0;
        for w in &factors {
            let m = w.residual.len();
            r.rows_mut(row, m).copy_from(&w.residual);
            for (s, js) in &w.blocks {
                j.view_mut((row, s * d), (m, d)).copy_from(js);
            }
            row += m;
        }
        Ok((j, r))
    }

    /// Applies `X_i ← Exp(δ_i)·X_i`, `b_i ← b_i + δ_i` to every keyframe.
    pub fn retract_all(&mut self, delta: &[DVector<f64>]) -> Result<()> {
        if delta.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), got: delta.len() });
        }
        for (kf, d) in self.keyframes.iter_mut().zip(delta) {
            let e = crate::state::StateError::from_vector(d)?;
            kf.state = crate::state::retract(&kf.state, &e)?;
        }
        Ok(())
    }

    /// Gauss–Newton on the window. A step below `tolerance` is applied and
    /// ends the iteration; a step that increases the cost is undone.
    pub fn solve(&mut self, max_iters: usize, tolerance: f64) -> Result<SolveReport> {
        self.solve_keep(max_iters, tolerance).map(|(r, _)| r)
    }

    /// As [`solve`](Self::solve), also returning the normal equations and
    /// last-block Schur complement at the final estimate when the last
    /// build is still valid.
    fn solve_keep(&mut self, max_iters: usize, tolerance: f64) -> Result<(SolveReport, Option<(NormalEquations, DMatrix<f64>)>)> {
        let mut report = SolveReport::default();
        for it in 0..max_iters {
            let ne = self.normal_equations()?;
            if it == 0 {
                report.initial_cost = ne.cost;
            }
            report.final_cost = ne.cost;
            let (delta, last_info) = ne.solve()?;
            report.iterations = it + 1;
            let step = delta.iter().map(|d| d.amax()).fold(0.0, f64::max);
            report.max_step = step;
            if step < tolerance {
                // Converged: take the small step without a cost check.
                self.retract_all(&delta)?;
                return Ok((report, Some((ne, last_info))));
            }
            let saved: Vec<RobotState> = self.keyframes.iter().map(|k| k.state.clone()).collect();
            self.retract_all(&delta)?;
            let cost = self.cost()?;
            if cost > ne.cost * (1.0 + 1e-12) {
                for (kf, s) in self.keyframes.iter_mut().zip(saved) {
                    kf.state = s;
                }
                report.rejected_step = true;
                return Ok((report, Some((ne, last_info))));
            }
            report.final_cost = cost;
        }
        Ok((report, None))
    }

    /// Folds the oldest keyframe into a prior on the next one. Only the
    /// factors touching the oldest keyframe enter the Schur complement.
    pub fn marginalize(&mut self) -> Result<()> {
        if self.len() < 2 {
            return Err(Error::Data("cannot marginalize a single-keyframe window".into()));
        }
        let factors = self.whitened_factors(true, true)?;
        let ne = Self::accumulate(2, self.dim(), &factors);
        let c = ne.diag[0].clone().cholesky().ok_or(Error::SingularSystem)?;
        let h01 = &ne.off[0];
        let info = &ne.diag[1] - h01.transpose() * c.solve(h01);
        let grad = &ne.grad[1] - h01.transpose() * c.solve(&ne.grad[0]);
        let kept = constrained_dims(&info);
        let ic = info.select_rows(&kept).select_columns(&kept).cholesky().ok_or(Error::SingularSystem)?;
        let sub_mean = -ic.solve(&grad.select_rows(&kept));
        let mut mean = DVector::zeros(info.nrows());
        for (c, &k) in kept.iter().enumerate() {
            mean[k] = sub_mean[c];
        }
        self.prior = Prior::from_information(&self.keyframes[1].state, &info, &mean)?;
        self.keyframes.remove(0);
        self.propagation.remove(0);
        Ok(())
    }
}

/// A keyframe estimate leaving the window, with its marginal covariance.
#[derive(Clone, Debug)]
pub struct LoggedState {
    pub state: RobotState,
    pub covariance: DMatrix<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SmootherStats {
    pub keyframes: u64,
    pub iterations: u64,
    pub rejected_steps: u64,
    pub lidar_accepted: u64,
    pub lidar_rejected: u64,
    pub gps_accepted: u64,
    pub gps_rejected: u64,
    pub stale_fixes: u64,
    pub slip_inflations: u64,
}

#[derive(Clone, Debug)]
pub struct InvariantSmoother {
    pub config: SmootherConfig,
    pub stats: SmootherStats,
    model: RobotModel,
    window: SmootherWindow,
    steps: Vec<ImuStep>,
    /// Per leg: in contact for every kinematic sample since the last keyframe.
    stance_through: Vec<bool>,
    pending: Vec<FixObservation>,
    latest_cov: DMatrix<f64>,
    last_gyro: Vector3<f64>,
    log: Vec<LoggedState>,
}

impl InvariantSmoother {
    /// `initial` must not carry contact slots; one slot per leg is created
    /// from `kin`.
    pub fn new(initial: RobotState, kin: &KinSample, model: &RobotModel, config: SmootherConfig) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        kin.validate()?;
        if initial.num_slots() != 0 {
            return Err(Error::Data("smoother start state must not carry contact slots".into()));
        }
        if kin.num_legs() != model.num_legs() || initial.num_legs() != model.num_legs() {
            return Err(Error::Data("leg count mismatch between model, state and sample".into()));
        }
        let mut state = initial;
        let mut cov = config.filter.base_covariance();
        let joint_cov = config.filter.joint_covariance();
        for (leg, l) in model.legs.iter().enumerate() {
            let q = kin.leg_q(leg);
            let f = fk(l, &q);
            let d = state.position() + state.rotation() * f;
            let noise = if kin.contacts[leg] {
                let rj = state.rotation() * fk_jacobian(l, &q);
                rj * joint_cov * rj.transpose()
            } else {
                Matrix3::identity() * config.swing_foot_variance
            };
            let slot = state.add_contact(leg, d)?;
            state.contacts[leg] = kin.contacts[leg];
            cov = augment_covariance(&cov, state.slot_offset(slot), &noise);
        }
        let prior = Prior::from_covariance(&state, &cov)?;
        let gravity = config.filter.noise.gravity;
        Ok(Self {
            stats: SmootherStats::default(),
            model: model.clone(),
            window: SmootherWindow::new(Keyframe::new(state), prior, gravity),
            steps: Vec::new(),
            stance_through: vec![true; model.num_legs()],
            pending: Vec::new(),
            latest_cov: cov,
            last_gyro: Vector3::zeros(),
            log: Vec::new(),
            config,
        })
    }

    pub fn window(&self) -> &SmootherWindow {
        &self.window
    }

    /// Newest keyframe estimate.
    pub fn latest_state(&self) -> &RobotState {
        &self.window.keyframes.last().expect("window is never empty").state
    }

    /// Marginal covariance of the newest keyframe after the last solve.
    pub fn latest_covariance(&self) -> &DMatrix<f64> {
        &self.latest_cov
    }

    pub fn push_lidar(&mut self, fix: &OdomFix) {
        self.pending.push(FixObservation {
            kind: ObservationKind::Lidar,
            stamp: fix.stamp,
            position: fix.position,
            covariance: fix.covariance,
        });
    }

    pub fn push_gps(&mut self, fix: &GpsFix) {
        self.pending.push(FixObservation {
            kind: ObservationKind::Gps,
            stamp: fix.stamp,
            position: fix.position,
            covariance: fix.covariance,
        });
    }

    /// Buffers one IMU step. `kin` is the kinematic sample at the end of the
    /// step; when the step completes a keyframe it supplies its kinematic
    /// factors. Returns whether a keyframe was created.
    pub fn push_imu(&mut self, imu: &ImuSample, dt: f64, kin: &KinSample) -> Result<bool> {
        if !(dt > 0.0 && dt <= 0.1) {
            return Err(Error::InvalidTimeStep(dt));
        }
        kin.validate()?;
        if kin.num_legs() != self.model.num_legs() {
            return Err(Error::Data("leg count mismatch between model and sample".into()));
        }
        self.steps.push(ImuStep { gyro: imu.gyro, accel: imu.accel, dt });
        for (s, c) in self.stance_through.iter_mut().zip(&kin.contacts) {
            *s &= *c;
        }
        self.last_gyro = imu.gyro;
        if self.steps.len() < self.config.decimation {
            return Ok(false);
        }
        self.add_keyframe(kin)?;
        Ok(true)
    }

    fn add_keyframe(&mut self, kin: &KinSample) -> Result<()> {
        let steps = std::mem::take(&mut self.steps);
        let stance = std::mem::replace(&mut self.stance_through, vec![true; self.model.num_legs()]);
        let gravity = self.window.gravity;
        let prev = self.latest_state().clone();

        let pre = preintegrate(&steps, &prev.bias);
        let mut state = predict_keyframe(&prev, &pre, &gravity);
        state.contacts = kin.contacts.clone();
        for (leg, l) in self.model.legs.iter().enumerate() {
            if !stance[leg] {
                let slot = state.slot_of_leg(leg).ok_or(Error::ContactNotTracked(leg))?;
                let d = state.position() + state.rotation() * fk(l, &kin.leg_q(leg));
                *state.pose.column_mut(FOOT0 + slot) = d;
            }
        }
        let released: Vec<usize> = (0..self.model.num_legs())
            .filter(|&leg| !stance[leg])
            .map(|leg| prev.slot_of_leg(leg).ok_or(Error::ContactNotTracked(leg)))
            .collect::<Result<_>>()?;
        let factor = PropagationFactor::new(&prev, steps, &self.config.filter.noise, &vec![1.0; self.model.num_legs()])?
            .release_slots(&prev, &released)?;
        let lin = propagation_linearize(&prev, &state, &factor.steps, &gravity)?;
        let mut predicted_cov = &lin.jac_from * &self.latest_cov * lin.jac_from.transpose() + &factor.covariance;
        symmetrize(&mut predicted_cov);

        let mut keyframe = Keyframe::new(state);
        self.add_kinematics(&mut keyframe, kin);
        self.window.push(factor, keyframe);
        self.attach_fixes(&predicted_cov);

        let (report, kept) = self.window.solve_keep(self.config.max_iters, self.config.tolerance)?;
        self.stats.keyframes += 1;
        self.stats.iterations += report.iterations as u64;
        self.stats.rejected_steps += report.rejected_step as u64;

        let (ne, last_info) = match kept {
            Some(k) => k,
            None => {
                let ne = self.window.normal_equations()?;
                let (_, info) = ne.solve()?;
                (ne, info)
            }
        };
        self.latest_cov = last_info.cholesky().ok_or(Error::SingularSystem)?.inverse();
        if self.window.len() > self.config.window {
            self.log_oldest(&ne.first_marginal_information()?)?;
            self.window.marginalize()?;
        }
        Ok(())
    }

    fn log_oldest(&mut self, info: &DMatrix<f64>) -> Result<()> {
        let covariance = info.clone().cholesky().ok_or(Error::SingularSystem)?.inverse();
        self.log.push(LoggedState {
            state: self.window.keyframes[0].state.clone(),
            covariance,
        });
        Ok(())
    }

    fn add_kinematics(&mut self, keyframe: &mut Keyframe, kin: &KinSample) {
        let joint_cov = self.config.filter.joint_covariance();
        let state = &keyframe.state;
        let omega = self.last_gyro - state.gyro_bias();
        let body_vel = state.rotation().transpose() * state.velocity();
        let mut obs = Vec::new();
        for (leg, l) in self.model.legs.iter().enumerate() {
            if !kin.contacts[leg] {
                continue;
            }
            let q = kin.leg_q(leg);
            let factor = slip_check(
                l,
                &q,
                &kin.leg_qdot(leg),
                &omega,
                &body_vel,
                true,
                self.config.filter.slip_threshold,
                self.config.filter.slip_inflation_max,
            );
            if factor > 1.0 {
                self.stats.slip_inflations += 1;
            }
            obs.push(KinematicObservation {
                leg,
                fk: fk(l, &q),
                jp: fk_jacobian(l, &q),
                joint_cov: joint_cov * factor,
            });
        }
        keyframe.kinematics = obs;
        keyframe.swing = self
            .model
            .legs
            .iter()
            .enumerate()
            .filter(|(leg, _)| !kin.contacts[*leg])
            .map(|(leg, l)| SwingObservation { leg, fk: fk(l, &kin.leg_q(leg)), variance: self.config.swing_foot_variance })
            .collect();
    }

    /// Attaches buffered fixes up to the newest keyframe stamp to their
    /// nearest keyframe (ties go to the earlier one), after the age check
    /// and the χ² gate.
    fn attach_fixes(&mut self, predicted_cov: &DMatrix<f64>) {
        let newest = self.window.len() - 1;
        let newest_stamp = self.window.keyframes[newest].state.stamp;
        let (ready, held): (Vec<_>, Vec<_>) = std::mem::take(&mut self.pending)
            .into_iter()
            .partition(|f| f.stamp <= newest_stamp + 1e-9);
        self.pending = held;
        for fix in ready {
            let mut best = 0;
            let mut best_gap = f64::INFINITY;
            for (i, kf) in self.window.keyframes.iter().enumerate() {
                let gap = (kf.state.stamp - fix.stamp).abs();
                if gap < best_gap - 1e-12 {
                    best = i;
                    best_gap = gap;
                }
            }
            if best_gap > self.config.filter.max_fix_age {
                self.stats.stale_fixes += 1;
                continue;
            }
            let cov = if best == newest { predicted_cov } else { &self.latest_cov };
            let state = &self.window.keyframes[best].state;
            let f = position_factor(state, &fix.position, &fix.covariance);
            let s = &f.jacobian * cov * f.jacobian.transpose();
            let s = Matrix3::from_iterator(s.iter().copied()) + f.covariance;
            let accepted = gate(&f.residual, &s, self.config.filter.chi2_threshold);
            match (fix.kind, accepted) {
                (ObservationKind::Lidar, true) => self.stats.lidar_accepted += 1,
                (ObservationKind::Lidar, false) => self.stats.lidar_rejected += 1,
                (_, true) => self.stats.gps_accepted += 1,
                (_, false) => self.stats.gps_rejected += 1,
            }
            if accepted {
                self.window.keyframes[best].fixes.push(fix);
            }
        }
    }

    /// Keyframes marginalized since the last call.
    pub fn take_log(&mut self) -> Vec<LoggedState> {
        std::mem::take(&mut self.log)
    }

    /// Remaining log plus every keyframe still in the window with its
    /// marginal covariance.
    pub fn finish(mut self) -> Result<Vec<LoggedState>> {
        let ne = self.window.normal_equations()?;
        let infos = ne.marginal_informations()?;
        let mut out = self.take_log();
        for (kf, info) in self.window.keyframes.iter().zip(infos) {
            out.push(LoggedState {
                state: kf.state.clone(),
                covariance: info.cholesky().ok_or(Error::SingularSystem)?.inverse(),
            });
        }
        Ok(out)
    }
}
