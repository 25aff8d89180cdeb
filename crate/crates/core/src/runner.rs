//! Runs one estimator over simulated or recorded streams and scores it.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, Alignment, FixCounts, LogEntry, Metrics, Timing, TrajectoryLog};
use crate::inekf::{FilterConfig, InvariantEkf};
use crate::kinematics::RobotModel;
use crate::lidar_odom::{LidarOdometry, LidarWorker, OdomConfig, Pose, ScanOutcome};
use crate::lie::Tangent;
use crate::sim::SimData;
use crate::smoother::{InvariantSmoother, SmootherConfig};
use crate::state::{retract, GpsFix, OdomFix, RobotState, StateError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorKind {
    Filter,
    Smoother,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LidarMode {
    Off,
    /// Pre-computed odometry fixes from the data set.
    Direct,
    /// Scans registered by the odometry worker thread.
    Icp,
}

impl FromStr for LidarMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(Self::Off),
            "direct" => Ok(Self::Direct),
            "icp" => Ok(Self::Icp),
            _ => Err(Error::Config(format!("unknown lidar mode `{s}` (off, direct, icp)"))),
        }
    }
}

impl fmt::Display for LidarMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Off => "off",
            Self::Direct => "direct",
            Self::Icp => "icp",
        })
    }
}

/// Estimator family plus sensor toggles. `pinekf`/`pis` are the
/// proprioceptive variants, `einekf`/`eis` use LiDAR and GPS.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Variant {
    pub kind: EstimatorKind,
    pub lidar: LidarMode,
    pub gps: bool,
}

impl Variant {
    pub const P_INEKF: Self = Self { kind: EstimatorKind::Filter, lidar: LidarMode::Off, gps: false };
    pub const E_INEKF_NO_GPS: Self = Self { kind: EstimatorKind::Filter, lidar: LidarMode::Direct, gps: false };
    pub const E_INEKF: Self = Self { kind: EstimatorKind::Filter, lidar: LidarMode::Direct, gps: true };
    pub const P_IS: Self = Self { kind: EstimatorKind::Smoother, lidar: LidarMode::Off, gps: false };
    pub const E_IS_NO_GPS: Self = Self { kind: EstimatorKind::Smoother, lidar: LidarMode::Direct, gps: false };
    pub const E_IS: Self = Self { kind: EstimatorKind::Smoother, lidar: LidarMode::Direct, gps: true };

    pub const ABLATION: [Self; 6] = [Self::P_INEKF, Self::E_INEKF_NO_GPS, Self::E_INEKF, Self::P_IS, Self::E_IS_NO_GPS, Self::E_IS];

    /// `pinekf`, `einekf`, `pis` or `eis` with the default sensor set.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "pinekf" => Ok(Self::P_INEKF),
            "einekf" => Ok(Self::E_INEKF),
            "pis" => Ok(Self::P_IS),
            "eis" => Ok(Self::E_IS),
            _ => Err(Error::Config(format!("unknown estimator `{name}` (pinekf, einekf, pis, eis)"))),
        }
    }

    pub fn exteroceptive(&self) -> bool {
        self.lidar != LidarMode::Off || self.gps
    }

    pub fn label(&self) -> String {
        let base = match (self.kind, self.exteroceptive()) {
            (EstimatorKind::Filter, false) => "P-InEKF",
            (EstimatorKind::Filter, true) => "E-InEKF",
            (EstimatorKind::Smoother, false) => "P-IS",
            (EstimatorKind::Smoother, true) => "E-IS",
        };
        let mut s = base.to_string();
        if self.exteroceptive() && !self.gps {
            s.push_str(" w/o GPS");
        }
        if self.lidar == LidarMode::Icp {
            s.push_str(" (icp)");
        }
        s
    }

    /// File-name friendly form, e.g. `eis-nogps`.
    pub fn slug(&self) -> String {
        let mut s = String::from(match (self.kind, self.exteroceptive()) {
            (EstimatorKind::Filter, false) => "pinekf",
            (EstimatorKind::Filter, true) => "einekf",
            (EstimatorKind::Smoother, false) => "pis",
            (EstimatorKind::Smoother, true) => "eis",
        });
        if self.exteroceptive() && !self.gps {
            s.push_str("-nogps");
        }
        if self.exteroceptive() && self.lidar == LidarMode::Off {
            s.push_str("-nolidar");
        }
        if self.lidar == LidarMode::Icp {
            s.push_str("-icp");
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    /// Shared filter settings; the smoother copies them.
    pub filter: FilterConfig,
    pub smoother: SmootherConfig,
    pub odometry: OdomConfig,
    /// Samples the initial estimate from the initial covariance instead of
    /// starting at the true pose.
    pub perturb_initial: bool,
    /// Seed for the initial perturbation.
    pub seed: u64,
}

impl RunConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            filter: FilterConfig::default(),
            smoother: SmootherConfig::default(),
            odometry: OdomConfig::default(),
            perturb_initial: false,
            seed: 0,
        }
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.smoother.window = window;
        self
    }

    fn smoother_config(&self) -> SmootherConfig {
        SmootherConfig { filter: self.filter.clone(), ..self.smoother.clone() }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOutput {
    pub log: TrajectoryLog,
    /// Estimator CPU time per IMU sample (s).
    pub step_times: Vec<f64>,
    pub lidar: FixCounts,
    pub gps: FixCounts,
    pub icp_fixes: u64,
    pub icp_failures: u64,
    pub icp_dropped: u64,
    pub slip_inflations: u64,
}

#[cfg(unix)]
fn cpu_time() -> f64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: clock_gettime only writes into the provided timespec.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return wall_time();
    }
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

#[cfg(not(unix))]
fn cpu_time() -> f64 {
    wall_time()
}

#[cfg(not(target_arch = "wasm32"))]
fn wall_time() -> f64 {
    use std::sync::OnceLock;
    use std::time::Instant;
    static START: OnceLock<Instant> = OnceLock::new();
    START.get_or_init(Instant::now).elapsed().as_secs_f64()
}

/// The browser target has no std clock; steps are reported as zero time.
#[cfg(target_arch = "wasm32")]
fn wall_time() -> f64 {
    0.0
}

/// Name of the clock used for step timing.
pub fn clock_name() -> &'static str {
    if cfg!(unix) {
        "thread-cpu"
    } else if cfg!(target_arch = "wasm32") {
        "none"
    } else {
        "wall"
    }
}

/// Start state: the true base state with zero bias estimate, optionally
/// perturbed by a draw from the initial covariance.
fn initial_estimate(truth: &RobotState, cfg: &RunConfig) -> Result<RobotState> {
    let mut s = RobotState::new(*truth.rotation(), *truth.velocity(), *truth.position(), Vector6::zeros(), truth.num_legs(), truth.stamp);
    if cfg.perturb_initial {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(7);
        let i = &cfg.filter.initial;
        let sd = [i.rotation.sqrt(), i.velocity.sqrt(), i.position.sqrt()];
        let xi: Vec<f64> = (0..9).map(|r| -sd[r / 3] * rng.sample::<f64, _>(StandardNormal)).collect();
        let delta = StateError { xi: Tangent::from_slice(&xi), zeta: Vector6::zeros() };
        s = retract(&s, &delta)?;
    }
    Ok(s)
}

/// Consumes the fixes with `lo < stamp <= hi` starting at `*next`.
fn window_of<'a, T>(fixes: &'a [T], next: &mut usize, lo: f64, hi: f64, stamp: impl Fn(&T) -> f64) -> &'a [T] {
    while *next < fixes.len() && stamp(&fixes[*next]) <= lo + 1e-9 {
        *next += 1;
    }
    let start = *next;
    while *next < fixes.len() && stamp(&fixes[*next]) <= hi + 1e-9 {
        *next += 1;
    }
    &fixes[start..*next]
}

struct Icp {
    worker: LidarWorker,
    next_scan: usize,
}

impl Icp {
    fn new(cfg: &RunConfig, truth0: &RobotState) -> Self {
        let body = Pose::new(*truth0.rotation(), *truth0.position());
        Self { worker: LidarWorker::spawn(LidarOdometry::new(cfg.odometry.clone(), body)), next_scan: 0 }
    }

    /// Hands the scan stamped in `(lo, hi]` to the worker.
    fn submit(&mut self, data: &SimData, lo: f64, hi: f64) -> Option<f64> {
        let scans = window_of(&data.scans, &mut self.next_scan, lo, hi, |s| s.stamp);
        let mut last = None;
        for s in scans {
            self.worker.submit(s.clone());
            last = Some(s.stamp);
        }
        last
    }

    /// Blocks until the worker has answered for `stamp`. Waiting costs the
    /// estimator thread no CPU time.
    fn collect(&mut self, stamp: Option<f64>, out: &mut RunOutput) -> Vec<OdomFix> {
        let Some(stamp) = stamp else {
            return Vec::new();
        };
        match self.worker.wait_for(stamp) {
            Some(ScanOutcome::Fix(f)) => {
                out.icp_fixes += 1;
                vec![f]
            }
            Some(ScanOutcome::Failed { reason, .. }) => {
                log::debug!("scan {stamp}: {reason}");
                out.icp_failures += 1;
                Vec::new()
            }
            None => Vec::new(),
        }
    }

    fn finish(self, out: &mut RunOutput) {
        out.icp_dropped = self.worker.dropped().len() as u64;
        let (rest, _) = self.worker.shutdown();
        for o in rest {
            match o {
                ScanOutcome::Fix(_) => out.icp_fixes += 1,
                ScanOutcome::Failed { .. } => out.icp_failures += 1,
            }
        }
    }
}

fn check_inputs(data: &SimData, model: &RobotModel, v: &Variant) -> Result<()> {
    if data.imu.is_empty() || data.truth.is_empty() {
        return Err(Error::EmptyObservation);
    }
    if data.kin.len() != data.imu.len() + 1 || data.truth.len() != data.imu.len() + 1 {
        return Err(Error::Data(format!(
            "expected n IMU and n+1 kinematic/truth samples, got {} / {} / {}",
            data.imu.len(),
            data.kin.len(),
            data.truth.len()
        )));
    }
    if data.kin[0].num_legs() != model.num_legs() {
        return Err(Error::Data("leg count of the kinematic stream does not match the robot model".into()));
    }
    if !(data.dt > 0.0) {
        return Err(Error::InvalidTimeStep(data.dt));
    }
    if v.gps && data.gps.is_empty() {
        return Err(Error::Config("GPS requested but the data set has no GPS stream".into()));
    }
    match v.lidar {
        LidarMode::Direct if data.lidar.is_empty() => Err(Error::Config("direct LiDAR requested but the data set has no odometry fixes".into())),
        LidarMode::Icp if data.scans.is_empty() => Err(Error::Config("ICP requested but the data set has no scans".into())),
        _ => Ok(()),
    }
}

/// Runs the configured estimator over `data`. Fixes stamped in
/// `(t_{i-1}, t_i]` are applied at tick `i`.
pub fn run(data: &SimData, model: &RobotModel, cfg: &RunConfig) -> Result<RunOutput> {
    let v = cfg.variant;
    check_inputs(data, model, &v)?;
    let init = initial_estimate(&data.truth[0], cfg)?;
    match v.kind {
        EstimatorKind::Filter => run_filter(data, model, cfg, init),
        EstimatorKind::Smoother => run_smoother(data, model, cfg, init),
    }
}

fn run_filter(data: &SimData, model: &RobotModel, cfg: &RunConfig, init: RobotState) -> Result<RunOutput> {
    let v = cfg.variant;
    let mut out = RunOutput::default();
    let mut f = InvariantEkf::from_kinematics(init, &data.kin[0], model, cfg.filter.clone())?;
    out.log.push(LogEntry::from_state(&f.state, &f.cov, 0.0))?;
    let mut icp = (v.lidar == LidarMode::Icp).then(|| Icp::new(cfg, &data.truth[0]));
    let (mut nl, mut ng) = (0, 0);
    let mut t_prev = data.kin[0].stamp;
    for i in 1..data.kin.len() {
        let t = data.kin[i].stamp;
        let submitted = icp.as_mut().and_then(|w| w.submit(data, t_prev, t));
        let start = cpu_time();
        f.predict(&data.imu[i - 1], t - t_prev)?;
        let elapsed = cpu_time() - start;
        let lidar: Vec<OdomFix> = match (v.lidar, icp.as_mut()) {
            (LidarMode::Direct, _) => window_of(&data.lidar, &mut nl, t_prev, t, |f| f.stamp).to_vec(),
            (LidarMode::Icp, Some(w)) => w.collect(submitted, &mut out),
            _ => Vec::new(),
        };
        let gps: &[GpsFix] = if v.gps { window_of(&data.gps, &mut ng, t_prev, t, |f| f.stamp) } else { &[] };
        let start = cpu_time();
        f.correct(Some(&data.kin[i]), model, &lidar, gps)?;
        let elapsed = elapsed + cpu_time() - start;
        out.step_times.push(elapsed);
        out.log.push(LogEntry::from_state(&f.state, &f.cov, elapsed))?;
        t_prev = t;
    }
    if let Some(w) = icp {
        w.finish(&mut out);
    }
    let s = &f.stats;
    out.lidar = FixCounts { accepted: s.lidar_accepted, rejected: s.lidar_rejected, stale: s.stale_fixes };
    out.gps = FixCounts { accepted: s.gps_accepted, rejected: s.gps_rejected, stale: 0 };
    out.slip_inflations = s.slip_inflations;
    Ok(out)
}

fn run_smoother(data: &SimData, model: &RobotModel, cfg: &RunConfig, init: RobotState) -> Result<RunOutput> {
    let v = cfg.variant;
    let mut out = RunOutput::default();
    let mut s = InvariantSmoother::new(init, &data.kin[0], model, cfg.smoother_config())?;
    let mut icp = (v.lidar == LidarMode::Icp).then(|| Icp::new(cfg, &data.truth[0]));
    let (mut nl, mut ng) = (0, 0);
    let mut t_prev = data.kin[0].stamp;
    // CPU time per IMU sample for each keyframe, keyed by its stamp bits.
    let mut per_keyframe: HashMap<u64, f64> = HashMap::new();
    per_keyframe.insert(t_prev.to_bits(), 0.0);
    let (mut acc, mut ticks) = (0.0, 0usize);
    let mut pending_log = Vec::new();
    for i in 1..data.kin.len() {
        let t = data.kin[i].stamp;
        let submitted = icp.as_mut().and_then(|w| w.submit(data, t_prev, t));
        let lidar: Vec<OdomFix> = match (v.lidar, icp.as_mut()) {
            (LidarMode::Direct, _) => window_of(&data.lidar, &mut nl, t_prev, t, |f| f.stamp).to_vec(),
            (LidarMode::Icp, Some(w)) => w.collect(submitted, &mut out),
            _ => Vec::new(),
        };
        let gps: &[GpsFix] = if v.gps { window_of(&data.gps, &mut ng, t_prev, t, |f| f.stamp) } else { &[] };
        let start = cpu_time();
        for fix in &lidar {
            s.push_lidar(fix);
        }
        for fix in gps {
            s.push_gps(fix);
        }
        let keyframe = s.push_imu(&data.imu[i - 1], t - t_prev, &data.kin[i])?;
        let elapsed = cpu_time() - start;
        out.step_times.push(elapsed);
        acc += elapsed;
        ticks += 1;
        if keyframe {
            per_keyframe.insert(s.latest_state().stamp.to_bits(), acc / ticks as f64);
            acc = 0.0;
            ticks = 0;
            pending_log.extend(s.take_log());
        }
        t_prev = t;
    }
    if let Some(w) = icp {
        w.finish(&mut out);
    }
    let st = s.stats.clone();
    log::debug!("smoother: {} keyframes, {} iterations, {} rejected", st.keyframes, st.iterations, st.rejected_steps);
    pending_log.extend(s.finish()?);
    for l in pending_log {
        let step = per_keyframe.get(&l.state.stamp.to_bits()).copied().unwrap_or(0.0);
        out.log.push(LogEntry::from_state(&l.state, &l.covariance, step))?;
    }
    out.lidar = FixCounts { accepted: st.lidar_accepted, rejected: st.lidar_rejected, stale: st.stale_fixes };
    out.gps = FixCounts { accepted: st.gps_accepted, rejected: st.gps_rejected, stale: 0 };
    out.slip_inflations = st.slip_inflations;
    Ok(out)
}

/// Descriptive fields of a run for the metrics file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLabel {
    pub scenario: String,
    pub seed: u64,
}

/// Scores `out` against the ground truth in `data`.
pub fn evaluate(out: &RunOutput, data: &SimData, cfg: &RunConfig, label: &RunLabel) -> Result<Metrics> {
    let gt = &data.truth;
    let nees = eval::nees(&out.log, gt)?;
    let last = out.log.entries.last().ok_or(Error::EmptyObservation)?;
    let i = gt.partition_point(|s| s.stamp < last.stamp - 1e-9).min(gt.len() - 1);
    let final_error: Vector3<f64> = last.position - gt[i].position();
    Ok(Metrics {
        estimator: cfg.variant.label(),
        scenario: label.scenario.clone(),
        seed: label.seed,
        window: (cfg.variant.kind == EstimatorKind::Smoother).then_some(cfg.smoother.window),
        entries: out.log.len(),
        ate: eval::ate(&out.log, gt, Alignment::None)?,
        ate_aligned: eval::ate(&out.log, gt, Alignment::YawTranslation)?,
        rpe_1m: eval::rpe_1m(&out.log, gt).ok(),
        final_error: [final_error.x, final_error.y, final_error.z],
        mean_nees: nees.iter().sum::<f64>() / nees.len() as f64,
        final_nees: *nees.last().expect("nees is non-empty"),
        lidar: out.lidar.clone(),
        gps: out.gps.clone(),
        icp_fixes: out.icp_fixes,
        icp_failures: out.icp_failures,
        icp_dropped: out.icp_dropped,
        slip_inflations: out.slip_inflations,
    })
}

pub fn timing(out: &RunOutput, cfg: &RunConfig) -> Timing {
    Timing {
        estimator: cfg.variant.label(),
        window: (cfg.variant.kind == EstimatorKind::Smoother).then_some(cfg.smoother.window),
        step: eval::timing_summary(&out.step_times),
        clock: clock_name().into(),
    }
}

/// One-line human summary.
pub fn summary(m: &Metrics, t: &Timing) -> String {
    let ws = m.window.map(|w| format!(" WS={w}")).unwrap_or_default();
    let rpe = m.rpe_1m.map(|r| format!("{r:.4}")).unwrap_or_else(|| "n/a".into());
    format!(
        "{}{} on {} (seed {}): ATE {:.4} m, RPE(1 m) {} m, final z error {:+.4} m, step {:.4} ms mean / {:.4} ms p99",
        m.estimator, ws, m.scenario, m.seed, m.ate, rpe, m.final_error[2], t.step.mean, t.step.p99
    )
}

/// Final-step base-error NEES of a single run.
pub fn final_nees(out: &RunOutput, data: &SimData) -> Result<f64> {
    let last = out.log.entries.last().ok_or(Error::EmptyObservation)?;
    let gt = data.truth.last().ok_or(Error::EmptyObservation)?;
    if (gt.stamp - last.stamp).abs() > 1e-9 {
        return Err(Error::Data("final estimate and truth stamps differ".into()));
    }
    let e = eval::base_error(gt, &last.rotation, &last.velocity, &last.position, &last.bias);
    eval::nees_value(&e, &last.covariance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate, LidarOutput, Scenario};

    fn clean(duration: f64) -> (SimData, RobotModel) {
        let model = RobotModel::default();
        let mut sc = Scenario::clean();
        sc.duration = duration;
        (generate(&sc, &model, LidarOutput::Fixes).unwrap(), model)
    }

    #[test]
    fn noise_free_runs_track_the_truth() {
        let (data, model) = clean(5.0);
        for v in Variant::ABLATION {
            let cfg = RunConfig::new(v);
            let out = run(&data, &model, &cfg).unwrap();
            let ate = eval::ate(&out.log, &data.truth, Alignment::None).unwrap();
            assert!(ate < 1e-3, "{}: {ate}", v.label());
            assert_eq!(out.step_times.len(), data.imu.len());
        }
    }

    #[test]
    fn metrics_are_deterministic() {
        let model = RobotModel::default();
        let mut sc = Scenario::outdoor();
        sc.duration = 4.0;
        sc.seed = 5;
        let label = RunLabel { scenario: "outdoor".into(), seed: 5 };
        for v in [Variant::E_INEKF, Variant::E_IS] {
            let mut cfg = RunConfig::new(v).with_window(3);
            cfg.perturb_initial = true;
            let json = || {
                let data = generate(&sc, &model, LidarOutput::Fixes).unwrap();
                let out = run(&data, &model, &cfg).unwrap();
                evaluate(&out, &data, &cfg, &label).unwrap().to_json()
            };
            assert_eq!(json(), json());
        }
    }

    #[test]
    fn perturbation_moves_the_start_by_the_initial_spread() {
        let (data, _) = clean(1.0);
        let mut cfg = RunConfig::new(Variant::P_INEKF);
        let same = initial_estimate(&data.truth[0], &cfg).unwrap();
        assert_eq!(same.position(), data.truth[0].position());
        cfg.perturb_initial = true;
        let moved = initial_estimate(&data.truth[0], &cfg).unwrap();
        // The invariant error (not the raw position offset) follows the spread.
        let e = eval::base_error(&data.truth[0], moved.rotation(), moved.velocity(), moved.position(), &moved.bias);
        let i = &cfg.filter.initial;
        for (block, var) in [(0, i.rotation), (3, i.velocity), (6, i.position)] {
            let n = e.rows(block, 3).norm();
            assert!(n > 0.0 && n < 10.0 * var.sqrt(), "block {block}: {n}");
        }
    }

    #[test]
    fn fixes_are_windowed_by_stamp() {
        let stamps = [0.1, 0.2, 0.2, 0.35, 0.5];
        let mut next = 0;
        assert_eq!(window_of(&stamps, &mut next, 0.0, 0.1, |s| *s), &[0.1]);
        assert_eq!(window_of(&stamps, &mut next, 0.1, 0.3, |s| *s), &[0.2, 0.2]);
        assert!(window_of(&stamps, &mut next, 0.3, 0.34, |s| *s).is_empty());
        assert_eq!(window_of(&stamps, &mut next, 0.34, 1.0, |s| *s), &[0.35, 0.5]);
    }

    #[test]
    fn missing_streams_are_configuration_errors() {
        let model = RobotModel::default();
        let mut sc = Scenario::indoor();
        sc.duration = 1.0;
        let data = generate(&sc, &model, LidarOutput::None).unwrap();
        for v in [Variant::E_INEKF, Variant::E_INEKF_NO_GPS, Variant { lidar: LidarMode::Icp, ..Variant::P_IS }] {
            let err = run(&data, &model, &RunConfig::new(v)).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{err}");
        }
    }

    #[test]
    fn malformed_data_is_rejected() {
        let (data, model) = clean(1.0);
        let mut empty = data.clone();
        empty.imu.clear();
        assert!(matches!(run(&empty, &model, &RunConfig::new(Variant::P_INEKF)), Err(Error::EmptyObservation)));
        let mut short = data.clone();
        short.kin.pop();
        assert!(matches!(run(&short, &model, &RunConfig::new(Variant::P_INEKF)), Err(Error::Data(_))));
        let mut three = model.clone();
        three.legs.pop();
        assert!(matches!(run(&data, &three, &RunConfig::new(Variant::P_INEKF)), Err(Error::Data(_))));
    }

    #[test]
    fn icp_mode_registers_scans() {
        let model = RobotModel::default();
        let mut sc = Scenario::outdoor();
        sc.duration = 2.0;
        let data = generate(&sc, &model, LidarOutput::Scans).unwrap();
        let cfg = RunConfig::new(Variant { lidar: LidarMode::Icp, ..Variant::E_INEKF_NO_GPS });
        let out = run(&data, &model, &cfg).unwrap();
        // The first scan seeds the map; every later one is registered.
        assert_eq!(out.icp_fixes + out.icp_failures, data.scans.len() as u64 - 1);
        assert!(out.icp_fixes >= data.scans.len() as u64 - 2, "{} of {}", out.icp_fixes, data.scans.len());
        assert_eq!(out.icp_dropped, 0);
        let ate = eval::ate(&out.log, &data.truth, Alignment::None).unwrap();
        assert!(ate < 0.1, "{ate}");
    }

    #[test]
    fn labels_and_slugs_are_distinct() {
        let labels: std::collections::HashSet<_> = Variant::ABLATION.iter().map(Variant::label).collect();
        let slugs: std::collections::HashSet<_> = Variant::ABLATION.iter().map(Variant::slug).collect();
        assert_eq!((labels.len(), slugs.len()), (6, 6));
        for name in ["pinekf", "einekf", "pis", "eis"] {
            assert_eq!(Variant::from_name(name).unwrap().slug(), name);
        }
        assert!(Variant::from_name("ekf").is_err());
    }
}
