//! IMU-driven propagation of the mean and of the invariant error.
//!
//! The discrete model is
//!
//! ```text
//! R' = R Exp((ω̃ - b_g) dt)
//! v' = v + R (ã - b_a) dt + g dt
//! p' = p + v dt + ½ R (ã - b_a) dt² + ½ g dt²
//! d' = d
//! ```
//!
//! which factors as `X' = Γ·Φ(X)·Υ(b)` with `Φ` a group automorphism. The
//! right-invariant error therefore evolves linearly through
//! [`error_transition`], independent of the trajectory. [`system_matrices`]
//! gives the continuous-time `A` and the noise map `B` used for `Q_d`.

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::{adjoint, hat, orthonormalize, right_jacobian, so3_exp, GroupElement};
use crate::state::{ImuSample, RobotState, POS, VEL};

/// Continuous-time noise densities. Each discrete sample carries
/// `σ / sqrt(dt)` of white noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    /// rad/s/√Hz
    pub gyro: f64,
    /// m/s²/√Hz
    pub accel: f64,
    /// m/s/√Hz, contact-point random walk
    pub contact: f64,
    /// rad/s²/√Hz
    pub gyro_bias: f64,
    /// m/s³/√Hz
    pub accel_bias: f64,
    pub gravity: Vector3<f64>,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            gyro: 2e-3,
            accel: 2e-2,
            contact: 1e-2,
            gyro_bias: 1e-4,
            accel_bias: 1e-3,
            gravity: Vector3::new(0.0, 0.0, -9.81),
        }
    }
}

impl NoiseParams {
    pub fn noiseless() -> Self {
        Self {
            gyro: 0.0,
            accel: 0.0,
            contact: 0.0,
            gyro_bias: 0.0,
            accel_bias: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.gyro, self.accel, self.contact, self.gyro_bias, self.accel_bias];
        if all.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Config("noise densities must be finite and non-negative".into()));
        }
        if !self.gravity.iter().all(|g| g.is_finite()) {
            return Err(Error::Config("gravity must be finite".into()));
        }
        Ok(())
    }
}

fn check_dt(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidTimeStep(dt))
    }
}

/// Noise-free discrete propagation. Contact points and biases are unchanged.
pub fn propagate_mean(state: &RobotState, imu: &ImuSample, dt: f64, gravity: &Vector3<f64>) -> Result<RobotState> {
    check_dt(dt)?;
    let w = imu.gyro - state.gyro_bias();
    let a = imu.accel - state.accel_bias();
    let r = *state.rotation();
    let v = *state.velocity();
    let p = *state.position();
    let ra = r * a;

    let mut out = state.clone();
    out.pose.set_rotation(orthonormalize(&(r * so3_exp(&(w * dt)))));
    *out.pose.column_mut(VEL) = v + (ra + gravity) * dt;
    *out.pose.column_mut(POS) = p + v * dt + (ra + gravity) * (0.5 * dt * dt);
    out.stamp = state.stamp + dt;
    Ok(out)
}

/// Output of [`system_matrices`]. All matrices are `dim × dim` with
/// `dim = 9 + 3N + 6`.
#[derive(Clone, Debug)]
pub struct SystemMatrices {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Covariance of the stacked noise `(w_ω, w_a, w_aΔt, w_d.., w_bω, w_ba)`.
    pub noise_cov: DMatrix<f64>,
    pub qd: DMatrix<f64>,
}

/// Continuous error dynamics `A`, noise map `B = dt·blkdiag(Ad_X̄, I₆)` and
/// `Q_d = B Cov(w̄) Bᵀ`. `contact_scale[i]` multiplies the variance of slot
/// `i`'s contact noise (1 in stance, large in swing).
pub fn system_matrices(
    state: &RobotState,
    noise: &NoiseParams,
    dt: f64,
    contact_scale: &[f64],
) -> Result<SystemMatrices> {
    check_dt(dt)?;
    let n_slots = state.num_slots();
    if contact_scale.len() != n_slots {
        return Err(Error::DimensionMismatch {
            expected: n_slots,
            got: contact_scale.len(),
        });
    }
    let dim = state.error_dim();
    let bo = state.bias_offset();
    let r = *state.rotation();

    let mut a = DMatrix::zeros(dim, dim);
    a.fixed_view_mut::<3, 3>(0, bo).copy_from(&(-r));
    a.fixed_view_mut::<3, 3>(3, 0).copy_from(&hat(&noise.gravity));
    a.fixed_view_mut::<3, 3>(3, bo).copy_from(&(-hat(state.velocity()) * r));
    a.fixed_view_mut::<3, 3>(3, bo + 3).copy_from(&(-r));
    a.fixed_view_mut::<3, 3>(6, 3).copy_from(&Matrix3::identity());
    a.fixed_view_mut::<3, 3>(6, bo).copy_from(&(-hat(state.position()) * r));
    for s in 0..n_slots {
        let o = state.slot_offset(s);
        a.fixed_view_mut::<3, 3>(o, bo).copy_from(&(-hat(state.foot(s)) * r));
    }

    let mut b = DMatrix::zeros(dim, dim);
    b.view_mut((0, 0), (bo, bo)).copy_from(&adjoint(&state.pose));
    b.view_mut((bo, bo), (6, 6)).fill_with_identity();
    b *= dt;

    let noise_cov = noise_covariance(noise, dt, contact_scale);
    let qd = &b * &noise_cov * b.transpose();
    Ok(SystemMatrices { a, b, noise_cov, qd })
}

/// `Cov(w̄)` for one step. The velocity and position slots use the
/// integrated white-noise covariance (`1`, `½dt`, `⅓dt²` relative to
/// `σ_a²/dt`), which keeps a single-step `Q_d` positive definite.
pub fn noise_covariance(noise: &NoiseParams, dt: f64, contact_scale: &[f64]) -> DMatrix<f64> {
    let n_slots = contact_scale.len();
    let dim = 15 + 3 * n_slots;
    let bo = 9 + 3 * n_slots;
    let ga2 = noise.accel * noise.accel;
    let mut c = DMatrix::zeros(dim, dim);
    let mut set = |o: usize, p: usize, val: f64| {
        for i in 0..3 {
            c[(o + i, p + i)] = val;
        }
    };
    set(0, 0, noise.gyro * noise.gyro / dt);
    set(3, 3, ga2 / dt);
    set(6, 6, ga2 * dt / 3.0);
    set(3, 6, 0.5 * ga2);
    set(6, 3, 0.5 * ga2);
    for (s, scale) in contact_scale.iter().enumerate() {
        set(9 + 3 * s, 9 + 3 * s, scale * noise.contact * noise.contact / dt);
    }
    set(bo, bo, noise.gyro_bias * noise.gyro_bias / dt);
    set(bo + 3, bo + 3, noise.accel_bias * noise.accel_bias / dt);
    c
}

/// First-order transition `I + A·dt`.
pub fn first_order_transition(a: &DMatrix<f64>, dt: f64) -> DMatrix<f64> {
    DMatrix::identity(a.nrows(), a.ncols()) + a * dt
}

/// Exact error transition of one IMU step, split into the pose block
/// `F = Ad_Γ·M` and the bias block `G = Ad_{X̄'}·D`, so that
/// `xi' ≈ F xi + G zeta`.
#[derive(Clone, Debug)]
pub struct StepJacobians {
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub next: RobotState,
    /// Right-perturbation derivative of the body increment w.r.t. the bias.
    pub d: DMatrix<f64>,
}

/// Body-increment bias derivative `D` for a `k`-column group.
pub fn body_increment_bias_jacobian(w_dt: &Vector3<f64>, dt: f64, k: usize) -> DMatrix<f64> {
    let dr_t = so3_exp(w_dt).transpose();
    let mut d = DMatrix::zeros(3 + 3 * k, 6);
    d.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-right_jacobian(w_dt) * dt));
    d.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-dr_t * dt));
    d.fixed_view_mut::<3, 3>(6, 3).copy_from(&(-dr_t * (0.5 * dt * dt)));
    d
}

/// Pose-block transition `Ad_Γ·M` for a `k`-column group.
pub fn pose_transition(gravity: &Vector3<f64>, dt: f64, k: usize) -> DMatrix<f64> {
    let n = 3 + 3 * k;
    let mut f = DMatrix::identity(n, n);
    f.fixed_view_mut::<3, 3>(3, 0).copy_from(&(hat(gravity) * dt));
    f.fixed_view_mut::<3, 3>(6, 0).copy_from(&(hat(gravity) * (0.5 * dt * dt)));
    f.fixed_view_mut::<3, 3>(6, 3).copy_from(&(Matrix3::identity() * dt));
    f
}

/// `Ad_X · D` without materializing the adjoint.
pub fn adjoint_times(x: &GroupElement, m: &DMatrix<f64>) -> DMatrix<f64> {
    let r = x.rotation();
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    let top = r * m.rows(0, 3);
    for (i, c) in x.columns().iter().enumerate() {
        let rows = hat(c) * &top + r * m.rows(3 + 3 * i, 3);
        out.rows_mut(3 + 3 * i, 3).copy_from(&rows);
    }
    out.rows_mut(0, 3).copy_from(&top);
    out
}

pub fn step_jacobians(state: &RobotState, imu: &ImuSample, dt: f64, gravity: &Vector3<f64>) -> Result<StepJacobians> {
    let next = propagate_mean(state, imu, dt, gravity)?;
    let k = state.pose.k();
    let w_dt = (imu.gyro - state.gyro_bias()) * dt;
    let d = body_increment_bias_jacobian(&w_dt, dt, k);
    let g = adjoint_times(&next.pose, &d);
    Ok(StepJacobians {
        f: pose_transition(gravity, dt, k),
        g,
        next,
        d,
    })
}

/// Full `(dim × dim)` error transition including the bias columns.
pub fn error_transition(state: &RobotState, imu: &ImuSample, dt: f64, gravity: &Vector3<f64>) -> Result<(DMatrix<f64>, RobotState)> {
    let sj = step_jacobians(state, imu, dt, gravity)?;
    let dim = state.error_dim();
    let bo = state.bias_offset();
    let mut phi = DMatrix::identity(dim, dim);
    phi.view_mut((0, 0), (bo, bo)).copy_from(&sj.f);
    phi.view_mut((0, bo), (bo, 6)).copy_from(&sj.g);
    Ok((phi, sj.next))
}

/// `P' = Φ P Φᵀ + Q_d` with `Φ = I + A·dt`, symmetrized.
pub fn propagate_covariance(p: &DMatrix<f64>, a: &DMatrix<f64>, qd: &DMatrix<f64>, dt: f64) -> Result<DMatrix<f64>> {
    propagate_covariance_with(p, &first_order_transition(a, dt), qd)
}

/// `P' = Φ P Φᵀ + Q_d` for an arbitrary transition, symmetrized and checked
/// for positive definiteness.
pub fn propagate_covariance_with(p: &DMatrix<f64>, phi: &DMatrix<f64>, qd: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = phi * p * phi.transpose() + qd;
    symmetrize(&mut out);
    if out.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite("propagated covariance"));
    }
    Ok(out)
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::{sek3_exp, Tangent};
    use crate::state::{right_invariant_error, StateError, FOOT0};
    use nalgebra::{DVector, Vector6};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    const G: Vector3<f64> = Vector3::new(0.0, 0.0, -9.81);

    fn imu(gyro: Vector3<f64>, accel: Vector3<f64>) -> ImuSample {
        ImuSample { stamp: 0.0, gyro, accel }
    }

    fn rv(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
        Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
    }

    fn gauss3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
        Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal))
    }

    fn state_with_foot(rng: &mut ChaCha8Rng) -> RobotState {
        let mut s = RobotState::new(so3_exp(&rv(rng, 1.0)), rv(rng, 1.0), rv(rng, 3.0), Vector6::zeros(), 4, 0.0);
        s.add_contact(0, rv(rng, 3.0)).unwrap();
        s
    }

    #[test]
    fn gravity_compensated_rest() {
        let bias = Vector6::new(0.01, -0.02, 0.03, 0.1, 0.2, -0.1);
        let r = so3_exp(&Vector3::new(0.1, 0.2, 0.3));
        let s = RobotState::new(r, Vector3::zeros(), Vector3::new(1.0, 2.0, 3.0), bias, 4, 0.0);
        let m = imu(s.gyro_bias(), s.accel_bias() - r.transpose() * G);
        let out = propagate_mean(&s, &m, 0.01, &G).unwrap();
        assert!((out.rotation() - r).amax() < 1e-12);
        assert!(out.velocity().amax() < 1e-12);
        assert!((out.position() - s.position()).amax() < 1e-12);
    }

    #[test]
    fn free_fall() {
        let s = RobotState::new(Matrix3::identity(), Vector3::zeros(), Vector3::zeros(), Vector6::zeros(), 4, 0.0);
        let dt = 0.01;
        let out = propagate_mean(&s, &imu(Vector3::zeros(), Vector3::zeros()), dt, &G).unwrap();
        assert!((out.velocity() - G * dt).norm() < 1e-12);
        assert!((out.position() - G * (0.5 * dt * dt)).norm() < 1e-12);
        assert!(propagate_mean(&s, &imu(Vector3::zeros(), Vector3::zeros()), 0.0, &G).is_err());
    }

    #[test]
    fn circular_motion_error_is_first_order() {
        // Constant yaw rate w, speed u along body x: a circle of radius u/w.
        let (w, u) = (0.5, 1.0);
        let run = |steps: usize| {
            let t = 2.0;
            let dt = t / steps as f64;
            let mut s = RobotState::new(Matrix3::identity(), Vector3::new(u, 0.0, 0.0), Vector3::zeros(), Vector6::zeros(), 4, 0.0);
            let m = imu(Vector3::new(0.0, 0.0, w), Vector3::new(0.0, w * u, 0.0) - G);
            for _ in 0..steps {
                // body acceleration is centripetal: w × v_body
                let a_body = Vector3::new(0.0, w * u, 0.0);
                let acc = a_body - s.rotation().transpose() * G;
                s = propagate_mean(&s, &imu(m.gyro, acc), dt, &G).unwrap();
            }
            let radius = u / w;
            let exact = Vector3::new(radius * (w * t).sin(), radius * (1.0 - (w * t).cos()), 0.0);
            (s.position() - exact).norm()
        };
        let e1 = run(1000);
        let e2 = run(2000);
        assert!(e1 < 1e-2);
        let ratio = e1 / e2;
        assert!((ratio - 2.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn a_matrix_at_identity() {
        let mut s = RobotState::new(Matrix3::identity(), Vector3::zeros(), Vector3::zeros(), Vector6::zeros(), 4, 0.0);
        s.add_contact(0, Vector3::zeros()).unwrap();
        let noise = NoiseParams::default();
        let sm = system_matrices(&s, &noise, 0.01, &[1.0]).unwrap();
        let mut expected = DMatrix::zeros(18, 18);
        expected.fixed_view_mut::<3, 3>(0, 12).copy_from(&(-Matrix3::identity()));
        expected.fixed_view_mut::<3, 3>(3, 0).copy_from(&hat(&noise.gravity));
        expected.fixed_view_mut::<3, 3>(3, 15).copy_from(&(-Matrix3::identity()));
        expected.fixed_view_mut::<3, 3>(6, 3).copy_from(&Matrix3::identity());
        assert_eq!(sm.a, expected);
        assert!((sm.b - DMatrix::identity(18, 18) * 0.01).amax() < 1e-15);
    }

    #[test]
    fn first_order_transition_approximates_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = state_with_foot(&mut rng);
        let noise = NoiseParams::default();
        let m = imu(rv(&mut rng, 1.0), rv(&mut rng, 5.0));
        for dt in [1e-2, 5e-3] {
            let sm = system_matrices(&s, &noise, dt, &[1.0]).unwrap();
            let approx = first_order_transition(&sm.a, dt);
            let (exact, _) = error_transition(&s, &m, dt, &noise.gravity).unwrap();
            let gap = (approx - exact).amax();
            assert!(gap < 50.0 * dt * dt, "dt {dt}: gap {gap}");
        }
    }

    fn propagate_error_pair(
        truth: &RobotState,
        xi0: &Tangent,
        inputs: &[ImuSample],
        dt: f64,
    ) -> (DVector<f64>, DVector<f64>) {
        let mut est = truth.clone();
        est.pose = sek3_exp(&-xi0).compose(&truth.pose);
        let mut x = truth.clone();
        let n = truth.error_dim();
        let mut predicted = DVector::zeros(n);
        predicted.rows_mut(0, xi0.dim()).copy_from(&xi0.to_vector());
        for m in inputs {
            let (phi, next_est) = error_transition(&est, m, dt, &G).unwrap();
            predicted = phi * predicted;
            est = next_est;
            x = propagate_mean(&x, m, dt, &G).unwrap();
        }
        let actual = right_invariant_error(&x, &est).unwrap().to_vector();
        (predicted, actual)
    }

    #[test]
    fn log_linear_and_trajectory_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dt = 0.005;
        let a = state_with_foot(&mut rng);
        let b = state_with_foot(&mut rng);
        let in_a: Vec<_> = (0..100).map(|_| imu(rv(&mut rng, 1.0), rv(&mut rng, 5.0))).collect();
        let in_b: Vec<_> = (0..100).map(|_| imu(rv(&mut rng, 1.0), rv(&mut rng, 5.0))).collect();
        for scale in [1e-2, 1e-3, 1e-4] {
            let dir = Tangent::from_slice(&(0..12).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
            let xi0 = dir.scaled(scale / dir.norm());
            let (pa, ea) = propagate_error_pair(&a, &xi0, &in_a, dt);
            let (_, eb) = propagate_error_pair(&b, &xi0, &in_b, dt);
            assert!((&pa - &ea).norm() <= 10.0 * scale * scale);
            assert!((ea - eb).amax() < 1e-8);
        }
    }

    #[test]
    fn covariance_trivial_cases() {
        let p = DMatrix::from_diagonal(&DVector::from_element(15, 0.3));
        let zero = DMatrix::zeros(15, 15);
        assert_eq!(propagate_covariance(&p, &zero, &zero, 0.01).unwrap(), p);
        let q = DMatrix::from_diagonal(&DVector::from_element(15, 0.2));
        assert_eq!(propagate_covariance_with(&zero, &DMatrix::identity(15, 15), &q).unwrap(), q);
        assert!(propagate_covariance_with(&zero, &DMatrix::identity(15, 15), &zero).is_err());
    }

    #[test]
    fn covariance_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = NoiseParams {
            gyro: 0.05,
            accel: 0.2,
            contact: 0.1,
            gyro_bias: 0.02,
            accel_bias: 0.1,
            ..NoiseParams::default()
        };
        let dt = 0.01;
        let steps = 50;
        let start = state_with_foot(&mut rng);
        let inputs: Vec<_> = (0..steps).map(|_| imu(rv(&mut rng, 1.0), rv(&mut rng, 3.0))).collect();

        let mut p = DMatrix::zeros(18, 18);
        let mut est = start.clone();
        for m in &inputs {
            let sm = system_matrices(&est, &noise, dt, &[1.0]).unwrap();
            let (phi, next) = error_transition(&est, m, dt, &noise.gravity).unwrap();
            p = &phi * p * phi.transpose() + sm.qd;
            est = next;
        }

        let runs = 5000;
        let mut cov = DMatrix::zeros(18, 18);
        let sq = dt.sqrt();
        for _ in 0..runs {
            let mut x = start.clone();
            for m in &inputs {
                let noisy = imu(
                    m.gyro + gauss3(&mut rng) * (noise.gyro / sq),
                    m.accel + gauss3(&mut rng) * (noise.accel / sq),
                );
                let r = *x.rotation();
                x = propagate_mean(&x, &noisy, dt, &noise.gravity).unwrap();
                *x.pose.column_mut(FOOT0) += r * gauss3(&mut rng) * (noise.contact * sq);
                let mut db = Vector6::zeros();
                db.fixed_rows_mut::<3>(0).copy_from(&(gauss3(&mut rng) * (noise.gyro_bias * sq)));
                db.fixed_rows_mut::<3>(3).copy_from(&(gauss3(&mut rng) * (noise.accel_bias * sq)));
                x.bias += db;
            }
            let e = right_invariant_error(&x, &est).unwrap().to_vector();
            cov += &e * e.transpose();
        }
        cov /= runs as f64;
        let rel = (&cov - &p).norm() / p.norm();
        assert!(rel < 0.15, "relative Frobenius gap {rel}");
        let _ = StateError::zeros(1);
    }

    #[test]
    fn covariance_stays_spd_over_long_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = NoiseParams::default();
        let mut s = state_with_foot(&mut rng);
        let mut p = DMatrix::identity(18, 18) * 1e-4;
        let dt = 0.005;
        for _ in 0..10_000 {
            let m = imu(rv(&mut rng, 0.5), rv(&mut rng, 2.0) - G);
            let sm = system_matrices(&s, &noise, dt, &[1.0]).unwrap();
            let (phi, next) = error_transition(&s, &m, dt, &noise.gravity).unwrap();
            p = propagate_covariance_with(&p, &phi, &sm.qd).unwrap();
            s = next;
            assert!(p == p.transpose());
        }
        assert!(p.symmetric_eigenvalues().min() > 0.0);
    }
}
