//! Trajectory metrics and estimate logs.
//!
//! # Estimate log (`trajectory.csv`)
//!
//! One header row, then one row per logged estimate, comma separated:
//!
//! | column | meaning |
//! |---|---|
//! | `stamp` | s |
//! | `qw,qx,qy,qz` | body-to-world rotation as a unit quaternion |
//! | `px,py,pz` | world position (m) |
//! | `vx,vy,vz` | world velocity (m/s) |
//! | `bgx,bgy,bgz` | gyro bias (rad/s) |
//! | `bax,bay,baz` | accelerometer bias (m/s²) |
//! | `P0`…`P14` | diagonal of the base error covariance, ordered rotation, velocity, position, gyro bias, accel bias |
//! | `step_time` | estimator CPU time per IMU sample for this estimate (s) |
//!
//! Numbers are written in Rust's shortest round-trip form.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::{sek3_log, GroupElement};
use crate::state::RobotState;

pub const BASE_DIM: usize = 15;

pub const TRAJECTORY_HEADER: &str = "stamp,qw,qx,qy,qz,px,py,pz,vx,vy,vz,bgx,bgy,bgz,bax,bay,baz,\
P0,P1,P2,P3,P4,P5,P6,P7,P8,P9,P10,P11,P12,P13,P14,step_time";

#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub stamp: f64,
    pub rotation: Matrix3<f64>,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub bias: Vector6<f64>,
    /// Base error covariance (15×15). Only the diagonal is written to CSV.
    pub covariance: DMatrix<f64>,
    pub step_time: f64,
}

/// Base block `[φ, v, p, b_g, b_a]` of a full error covariance.
pub fn base_covariance(full: &DMatrix<f64>) -> DMatrix<f64> {
    let n = full.nrows();
    let idx: Vec<usize> = (0..9).chain(n - 6..n).collect();
    DMatrix::from_fn(BASE_DIM, BASE_DIM, |i, j| full[(idx[i], idx[j])])
}

impl LogEntry {
    pub fn from_state(state: &RobotState, full_cov: &DMatrix<f64>, step_time: f64) -> Self {
        Self {
            stamp: state.stamp,
            rotation: *state.rotation(),
            position: *state.position(),
            velocity: *state.velocity(),
            bias: state.bias,
            covariance: base_covariance(full_cov),
            step_time,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryLog {
    pub entries: Vec<LogEntry>,
}

fn join(vals: impl IntoIterator<Item = f64>) -> String {
    vals.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl TrajectoryLog {
    pub fn push(&mut self, e: LogEntry) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if e.stamp <= last.stamp {
                return Err(Error::Data(format!("log stamps must increase ({} after {})", e.stamp, last.stamp)));
            }
        }
        self.entries.push(e);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        writeln!(w, "{TRAJECTORY_HEADER}")?;
        for e in &self.entries {
            let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(e.rotation));
            let mut v = vec![e.stamp, q.w, q.i, q.j, q.k];
            v.extend(e.position.iter());
            v.extend(e.velocity.iter());
            v.extend(e.bias.iter());
            v.extend(e.covariance.diagonal().iter());
            v.push(e.step_time);
            writeln!(w, "{}", join(v))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(fs::File::create(path)?)
    }

    /// Reads a log written by [`write_csv`](Self::write_csv); the
    /// covariance comes back diagonal.
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != TRAJECTORY_HEADER {
            return Err(Error::Data("trajectory log: unexpected header".into()));
        }
        let mut log = TrajectoryLog::default();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let v: Vec<f64> = line
                .split(',')
                .map(|x| x.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Data(format!("trajectory log line {}: {e}", n + 2)))?;
            if v.len() != 33 {
                return Err(Error::Data(format!("trajectory log line {}: {} columns", n + 2, v.len())));
            }
            let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(v[1], v[2], v[3], v[4]));
            log.push(LogEntry {
                stamp: v[0],
                rotation: q.to_rotation_matrix().into_inner(),
                position: Vector3::new(v[5], v[6], v[7]),
                velocity: Vector3::new(v[8], v[9], v[10]),
                bias: Vector6::from_column_slice(&v[11..17]),
                covariance: DMatrix::from_diagonal(&DVector::from_column_slice(&v[17..32])),
                step_time: v[32],
            })?;
        }
        Ok(log)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(BufReader::new(fs::File::open(path)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Alignment {
    None,
    /// Yaw rotation plus translation, the unobservable directions of
    /// inertial-legged odometry.
    YawTranslation,
}

/// Ground truth position at `t`, linear between samples.
fn interpolate(gt: &[RobotState], t: f64) -> Option<(Vector3<f64>, usize)> {
    let first = gt.first()?.stamp;
    let last = gt.last()?.stamp;
    if t < first - 1e-9 || t > last + 1e-9 {
        return None;
    }
    let i = gt.partition_point(|s| s.stamp <= t);
    if i == 0 {
        return Some((*gt[0].position(), 0));
    }
    if i >= gt.len() {
        return Some((*gt[gt.len() - 1].position(), gt.len() - 1));
    }
    let (a, b) = (&gt[i - 1], &gt[i]);
    let w = (t - a.stamp) / (b.stamp - a.stamp);
    let nearest = if w < 0.5 { i - 1 } else { i };
    Some((a.position() * (1.0 - w) + b.position() * w, nearest))
}

/// Estimate/truth pairs at the estimate stamps: `(p̂, R̂, p, index of the
/// nearest truth sample)`.
fn pairs<'a>(est: &'a TrajectoryLog, gt: &[RobotState]) -> Vec<(&'a LogEntry, Vector3<f64>, usize)> {
    est.entries
        .iter()
        .filter_map(|e| interpolate(gt, e.stamp).map(|(p, i)| (e, p, i)))
        .collect()
}

/// Yaw and translation minimizing `Σ‖Rz(θ)·a + t − b‖²`.
pub fn align_yaw_translation(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = a.len() as f64;
    let ca = a.iter().sum::<Vector3<f64>>() / n;
    let cb = b.iter().sum::<Vector3<f64>>() / n;
    let (mut s, mut c) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x - ca, y - cb);
        s += x.x * y.y - x.y * y.x;
        c += x.x * y.x + x.y * y.y;
    }
    let r = *Rotation3::from_axis_angle(&Vector3::z_axis(), s.atan2(c)).matrix();
    (r, cb - r * ca)
}

/// Mean position error at the estimate stamps.
pub fn ate(est: &TrajectoryLog, gt: &[RobotState], align: Alignment) -> Result<f64> {
    let p = pairs(est, gt);
    if p.is_empty() {
        return Err(Error::Data("no overlap between estimate and ground truth".into()));
    }
    let a: Vec<Vector3<f64>> = p.iter().map(|x| x.0.position).collect();
    let b: Vec<Vector3<f64>> = p.iter().map(|x| x.1).collect();
    let (r, t) = match align {
        Alignment::None => (Matrix3::identity(), Vector3::zeros()),
        Alignment::YawTranslation => align_yaw_translation(&a, &b),
    };
    Ok(a.iter().zip(&b).map(|(x, y)| (r * x + t - y).norm()).sum::<f64>() / a.len() as f64)
}

/// Relative position error over 1 m of ground-truth path, with both deltas
/// expressed in the body frame at the segment start.
pub fn rpe_1m(est: &TrajectoryLog, gt: &[RobotState]) -> Result<f64> {
    rpe(est, gt, 1.0)
}

pub fn rpe(est: &TrajectoryLog, gt: &[RobotState], length: f64) -> Result<f64> {
    let p = pairs(est, gt);
    let mut dist = Vec::with_capacity(p.len());
    let mut acc = 0.0;
    for (k, x) in p.iter().enumerate() {
        if k > 0 {
            acc += (x.1 - p[k - 1].1).norm();
        }
        dist.push(acc);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut j = 0;
    for i in 0..p.len() {
        j = j.max(i + 1);
        while j < p.len() && dist[j] - dist[i] < length - 1e-9 {
            j += 1;
        }
        if j >= p.len() {
            break;
        }
        let (ei, gi, ni) = &p[i];
        let (ej, gj, _) = &p[j];
        let de = ei.rotation.transpose() * (ej.position - ei.position);
        let dg = gt[*ni].rotation().transpose() * (gj - gi);
        total += (de - dg).norm();
        count += 1;
    }
    if count == 0 {
        return Err(Error::Data(format!("ground-truth path shorter than {length} m")));
    }
    Ok(total / count as f64)
}

/// `[Log(X X̂⁻¹) on (R, v, p); b − b̂]`, the base error of an estimate.
pub fn base_error(truth: &RobotState, rotation: &Matrix3<f64>, velocity: &Vector3<f64>, position: &Vector3<f64>, bias: &Vector6<f64>) -> DVector<f64> {
    let x = GroupElement::new(*truth.rotation(), vec![*truth.velocity(), *truth.position()]);
    let xh = GroupElement::new(*rotation, vec![*velocity, *position]);
    let xi = sek3_log(&x.compose(&xh.inverse())).to_vector();
    let mut e = DVector::zeros(BASE_DIM);
    e.rows_mut(0, 9).copy_from(&xi);
    e.rows_mut(9, 6).copy_from(&(truth.bias - bias));
    e
}

/// `eᵀ P⁻¹ e`.
pub fn nees_value(error: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    if cov.nrows() != error.len() {
        return Err(Error::DimensionMismatch { expected: error.len(), got: cov.nrows() });
    }
    let c = cov.clone().cholesky().ok_or(Error::NotPositiveDefinite("NEES covariance"))?;
    Ok(error.dot(&c.solve(error)))
}

/// NEES of the base error for each logged entry matched to the truth
/// sample with the same stamp (within 1e-9 s).
pub fn nees(est: &TrajectoryLog, gt: &[RobotState]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(est.len());
    for e in &est.entries {
        let i = gt.partition_point(|s| s.stamp < e.stamp - 1e-9);
        let Some(truth) = gt.get(i).filter(|s| (s.stamp - e.stamp).abs() < 1e-9) else {
            continue;
        };
        let err = base_error(truth, &e.rotation, &e.velocity, &e.position, &e.bias);
        out.push(nees_value(&err, &e.covariance)?);
    }
    if out.is_empty() {
        return Err(Error::Data("no estimate stamp matches the ground truth".into()));
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub steps: usize,
    /// ms
    pub mean: f64,
    pub p50: f64,
    pub p99: f64,
    pub max: f64,
}

/// Summary of per-step times given in seconds, reported in milliseconds.
pub fn timing_summary(times: &[f64]) -> TimingSummary {
    if times.is_empty() {
        return TimingSummary::default();
    }
    let mut s: Vec<f64> = times.iter().map(|t| t * 1e3).collect();
    s.sort_by(f64::total_cmp);
    let q = |f: f64| s[((s.len() - 1) as f64 * f).round() as usize];
    TimingSummary { steps: s.len(), mean: s.iter().sum::<f64>() / s.len() as f64, p50: q(0.5), p99: q(0.99), max: s[s.len() - 1] }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FixCounts {
    pub accepted: u64,
    pub rejected: u64,
    pub stale: u64,
}

/// Deterministic per-run metrics (`metrics.json`).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub estimator: String,
    pub scenario: String,
    pub seed: u64,
    pub window: Option<usize>,
    pub entries: usize,
    /// m
    pub ate: f64,
    pub ate_aligned: f64,
    pub rpe_1m: Option<f64>,
    /// Estimate minus truth at the last logged stamp (m).
    pub final_error: [f64; 3],
    pub mean_nees: f64,
    pub final_nees: f64,
    pub lidar: FixCounts,
    pub gps: FixCounts,
    pub icp_fixes: u64,
    pub icp_failures: u64,
    pub icp_dropped: u64,
    pub slip_inflations: u64,
}

impl Metrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// Wall/CPU timing of a run (`timing.json`); kept apart from the
/// deterministic metrics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub estimator: String,
    pub window: Option<usize>,
    pub step: TimingSummary,
    pub clock: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::so3_exp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn line_truth(n: usize, step: f64) -> Vec<RobotState> {
        (0..n)
            .map(|i| RobotState::new(Matrix3::identity(), Vector3::new(1.0, 0.0, 0.0), Vector3::new(i as f64 * step, 0.0, 0.0), Vector6::zeros(), 4, i as f64 * step))
            .collect()
    }

    fn wiggly_truth(n: usize) -> Vec<RobotState> {
        (0..n)
            .map(|i| {
                let t = i as f64 * 0.1;
                let yaw = 0.3 * t;
                let p = Vector3::new(t.sin() * 5.0, (0.7 * t).cos() * 3.0 + t, 0.2 * t);
                RobotState::new(so3_exp(&Vector3::new(0.0, 0.0, yaw)), Vector3::zeros(), p, Vector6::zeros(), 4, t)
            })
            .collect()
    }

    fn log_of(states: &[RobotState], f: impl Fn(&RobotState) -> (Matrix3<f64>, Vector3<f64>)) -> TrajectoryLog {
        let mut log = TrajectoryLog::default();
        for s in states {
            let (r, p) = f(s);
            log.push(LogEntry {
                stamp: s.stamp,
                rotation: r,
                position: p,
                velocity: *s.velocity(),
                bias: s.bias,
                covariance: DMatrix::identity(15, 15) * 1e-4,
                step_time: 1e-5,
            })
            .unwrap();
        }
        log
    }

    #[test]
    fn identical_trajectories_score_zero() {
        let gt = wiggly_truth(200);
        let est = log_of(&gt, |s| (*s.rotation(), *s.position()));
        assert_eq!(ate(&est, &gt, Alignment::None).unwrap(), 0.0);
        assert!(ate(&est, &gt, Alignment::YawTranslation).unwrap() < 1e-12);
        assert_eq!(rpe_1m(&est, &gt).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset() {
        let gt = wiggly_truth(200);
        let est = log_of(&gt, |s| (*s.rotation(), s.position() + Vector3::new(0.0, 0.0, 1.0)));
        assert!((ate(&est, &gt, Alignment::None).unwrap() - 1.0).abs() < 1e-12);
        assert!(rpe_1m(&est, &gt).unwrap() < 1e-12);
    }

    #[test]
    fn yaw_translation_alignment_removes_rigid_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = wiggly_truth(300);
        for _ in 0..10 {
            let yaw = rng.random_range(-3.0..3.0);
            let rz = so3_exp(&Vector3::new(0.0, 0.0, yaw));
            let t = Vector3::from_fn(|_, _| rng.random_range(-10.0..10.0));
            let est = log_of(&gt, |s| (rz * s.rotation(), rz * s.position() + t));
            assert!(ate(&est, &gt, Alignment::None).unwrap() > 0.1);
            assert!(ate(&est, &gt, Alignment::YawTranslation).unwrap() < 1e-9);
            // RPE ignores the rigid transform
            assert!(rpe_1m(&est, &gt).unwrap() < 1e-9);
        }
    }

    #[test]
    fn scaled_line_rpe() {
        let gt = line_truth(1001, 0.1);
        let est = log_of(&gt, |s| (*s.rotation(), s.position() * 1.01));
        assert!((rpe_1m(&est, &gt).unwrap() - 0.01).abs() < 1e-9);
        let short = line_truth(5, 0.1);
        assert!(rpe_1m(&log_of(&short, |s| (*s.rotation(), *s.position())), &short).is_err());
    }

    #[test]
    fn interpolates_truth_between_samples() {
        let gt = line_truth(11, 1.0);
        let mut log = TrajectoryLog::default();
        let mut e = log_of(&gt[..1], |s| (*s.rotation(), *s.position())).entries.remove(0);
        e.stamp = 2.5;
        e.position = Vector3::new(2.5, 0.0, 0.0);
        log.push(e).unwrap();
        assert!(ate(&log, &gt, Alignment::None).unwrap() < 1e-12);
        assert!(ate(&TrajectoryLog::default(), &gt, Alignment::None).is_err());
    }

    #[test]
    fn log_stamps_must_increase() {
        let gt = line_truth(3, 1.0);
        let mut log = log_of(&gt, |s| (*s.rotation(), *s.position()));
        let again = log.entries[0].clone();
        assert!(log.push(again).is_err());
    }

    #[test]
    fn nees_of_calibrated_gaussian_is_near_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = DMatrix::from_fn(15, 15, |_, _| rng.random_range(-1.0..1.0));
        let cov = &a * a.transpose() + DMatrix::identity(15, 15) * 0.1;
        let l = cov.clone().cholesky().unwrap().l();
        let n = 4000;
        let mean: f64 = (0..n)
            .map(|_| {
                let z = DVector::from_fn(15, |_, _| rng.sample(StandardNormal));
                nees_value(&(&l * z), &cov).unwrap()
            })
            .sum::<f64>()
            / n as f64;
        // 99.9% band of the mean of n χ²(15) draws
        let band = 3.3 * (2.0 * 15.0 / n as f64).sqrt();
        assert!((mean - 15.0).abs() < band, "{mean}");
        let e = &l * DVector::from_element(15, 1.0);
        let base = nees_value(&e, &cov).unwrap();
        assert!((nees_value(&e, &(&cov * 0.01)).unwrap() - 100.0 * base).abs() < 1e-6 * base);
        assert!((nees_value(&e, &(&cov * 100.0)).unwrap() - base / 100.0).abs() < 1e-6 * base);
        assert!(nees_value(&e, &DMatrix::zeros(15, 15)).is_err());
    }

    #[test]
    fn base_error_is_zero_for_the_truth() {
        let gt = wiggly_truth(3);
        let s = &gt[2];
        let e = base_error(s, s.rotation(), s.velocity(), s.position(), &s.bias);
        assert!(e.amax() < 1e-15);
        let est = log_of(&gt, |s| (*s.rotation(), *s.position()));
        assert!(nees(&est, &gt).unwrap().iter().all(|v| *v < 1e-20));
    }

    #[test]
    fn csv_roundtrip() {
        let gt = wiggly_truth(20);
        let log = log_of(&gt, |s| (*s.rotation(), *s.position()));
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), TRAJECTORY_HEADER);
        assert_eq!(TRAJECTORY_HEADER.split(',').count(), 33);
        let back = TrajectoryLog::read_csv(buf.as_slice()).unwrap();
        for (a, b) in back.entries.iter().zip(&log.entries) {
            assert_eq!(a.stamp, b.stamp);
            assert_eq!(a.position, b.position);
            assert!((a.rotation - b.rotation).amax() < 1e-15);
            assert_eq!(a.covariance.diagonal(), b.covariance.diagonal());
        }
        assert!(TrajectoryLog::read_csv("stamp,px\n".as_bytes()).is_err());
    }

    #[test]
    fn timing_percentiles() {
        let times: Vec<f64> = (1..=100).map(|i| i as f64 * 1e-3).collect();
        let t = timing_summary(&times);
        assert_eq!(t.steps, 100);
        assert!((t.mean - 50.5).abs() < 1e-9);
        assert!((t.p50 - 51.0).abs() < 1e-9 || (t.p50 - 50.0).abs() < 1e-9);
        assert_eq!(t.max, 100.0);
        assert_eq!(timing_summary(&[]).steps, 0);
    }
}
