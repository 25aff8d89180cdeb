//! Scan-to-map LiDAR odometry.
//!
//! A voxel-hashed local map, a constant-velocity initial guess, an adaptive
//! correspondence threshold and robust point-to-point ICP. The odometry
//! runs on its own thread ([`LidarWorker`]) and hands position fixes back
//! to the estimator.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::sync::{mpsc, Arc, Condvar, Mutex};
use std::thread::JoinHandle;

use nalgebra::{Matrix3, Matrix6, SymmetricEigen, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::{hat, left_jacobian, orthonormalize, so3_exp, so3_log};
use crate::state::OdomFix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(self.rotation * other.rotation, self.rotation * other.translation + self.translation)
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose::new(rt, -(rt * self.translation))
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `Exp(δ)·self` with `δ = (φ, ρ)`.
    pub fn left_update(&self, delta: &Vector6<f64>) -> Pose {
        let phi = delta.fixed_rows::<3>(0).into_owned();
        let rho = delta.fixed_rows::<3>(3).into_owned();
        let step = Pose::new(so3_exp(&phi), left_jacobian(&phi) * rho);
        let out = step.compose(self);
        Pose::new(orthonormalize(&out.rotation), out.translation)
    }

    pub fn angle(&self) -> f64 {
        so3_log(&self.rotation).norm()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frame {
    Sensor,
    World,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub frame: Frame,
    pub stamp: f64,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>, frame: Frame, stamp: f64) -> Self {
        Self { points, frame, stamp }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.iter().all(|p| p.iter().all(|v| v.is_finite())) {
            Ok(())
        } else {
            Err(Error::Data(format!("non-finite point in scan at t={}", self.stamp)))
        }
    }

    pub fn transformed(&self, pose: &Pose, frame: Frame) -> PointCloud {
        PointCloud::new(self.points.iter().map(|p| pose.transform(p)).collect(), frame, self.stamp)
    }
}

type VoxelKey = [i64; 3];

fn voxel_key(p: &Vector3<f64>, voxel: f64) -> VoxelKey {
    [(p.x / voxel).floor() as i64, (p.y / voxel).floor() as i64, (p.z / voxel).floor() as i64]
}

/// Keeps the first point that lands in each voxel, in input order.
pub fn downsample(points: &[Vector3<f64>], voxel: f64) -> Vec<Vector3<f64>> {
    assert!(voxel > 0.0, "voxel size must be positive");
    let mut seen = HashSet::with_capacity(points.len());
    points.iter().filter(|p| seen.insert(voxel_key(p, voxel))).copied().collect()
}

#[derive(Clone, Debug)]
pub struct VoxelMap {
    voxel: f64,
    max_points_per_voxel: usize,
    cells: HashMap<VoxelKey, Vec<Vector3<f64>>>,
}

impl VoxelMap {
    pub fn new(voxel: f64, max_points_per_voxel: usize) -> Self {
        assert!(voxel > 0.0 && max_points_per_voxel > 0);
        Self { voxel, max_points_per_voxel, cells: HashMap::new() }
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn len(&self) -> usize {
        self.cells.values().map(Vec::len).sum()
    }

    pub fn voxel_count(&self) -> usize {
        self.cells.len()
    }

    pub fn max_occupancy(&self) -> usize {
        self.cells.values().map(Vec::len).max().unwrap_or(0)
    }

    /// Points beyond a voxel's capacity are discarded.
    pub fn insert(&mut self, points: &[Vector3<f64>]) {
        for p in points {
            let cell = self.cells.entry(voxel_key(p, self.voxel)).or_default();
            if cell.len() < self.max_points_per_voxel {
                cell.push(*p);
            }
        }
    }

    pub fn remove_far(&mut self, center: &Vector3<f64>, radius: f64) {
        let r2 = radius * radius;
        self.cells.retain(|_, pts| pts.first().is_some_and(|p| (p - center).norm_squared() < r2));
    }

    /// Whether every stored point lies in the voxel it is filed under.
    pub fn is_consistent(&self) -> bool {
        self.cells.iter().all(|(k, pts)| pts.iter().all(|p| voxel_key(p, self.voxel) == *k))
    }

    pub fn points(&self) -> impl Iterator<Item = &Vector3<f64>> {
        self.cells.values().flatten()
    }

    /// Nearest stored point among the 27 voxels around `q`, with its
    /// squared distance.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(Vector3<f64>, f64)> {
        let k = voxel_key(q, self.voxel);
        let mut best: Option<(Vector3<f64>, f64)> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(cell) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) else {
                        continue;
                    };
                    for p in cell {
                        let d2 = (p - q).norm_squared();
                        if best.is_none_or(|(_, b)| d2 < b) {
                            best = Some((*p, d2));
                        }
                    }
                }
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationConfig {
    pub max_iters: usize,
    /// Convergence bound on `‖δ‖∞`.
    pub tolerance: f64,
    pub min_correspondences: usize,
    /// Smallest accepted ratio of the scan's smallest to largest principal
    /// variance; flatter scans cannot constrain all six degrees of freedom.
    pub min_spread_ratio: f64,
    /// Lower bound on the kernel width (m).
    pub min_kernel: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self { max_iters: 50, tolerance: 1e-6, min_correspondences: 10, min_spread_ratio: 1e-4, min_kernel: 5e-3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Registration {
    pub pose: Pose,
    pub iterations: usize,
    pub correspondences: usize,
    pub converged: bool,
}

fn spread_ratio(points: &[Vector3<f64>]) -> f64 {
    let n = points.len() as f64;
    let mean = points.iter().sum::<Vector3<f64>>() / n;
    let cov = points.iter().map(|p| (p - mean) * (p - mean).transpose()).sum::<Matrix3<f64>>() / n;
    let eig = SymmetricEigen::new(cov).eigenvalues;
    let max = eig.max();
    if max <= 0.0 {
        0.0
    } else {
        eig.min().max(0.0) / max
    }
}

/// Geman–McClure weight `(σ²/(σ² + r²))²`.
fn gm_weight(r2: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    let w = s2 / (s2 + r2);
    w * w
}

/// Finds `T` with `T·scan ≈ map` by Gauss–Newton on the robust
/// point-to-point cost, starting from `guess`. Correspondences farther than
/// `threshold` are dropped. The kernel width starts at `threshold / 3` and
/// follows three robust standard deviations of the residuals, so inliers
/// keep full weight while outliers fade as the alignment tightens.
pub fn register(
    map: &VoxelMap,
    scan: &[Vector3<f64>],
    guess: &Pose,
    threshold: f64,
    config: &RegistrationConfig,
) -> Result<Registration> {
    if map.is_empty() {
        return Err(Error::RegistrationFailed("empty map".into()));
    }
    if scan.len() < config.min_correspondences {
        return Err(Error::RegistrationFailed(format!("scan has {} points", scan.len())));
    }
    let spread = spread_ratio(scan);
    if spread < config.min_spread_ratio {
        return Err(Error::RegistrationFailed(format!("degenerate scan geometry (spread ratio {spread:.2e})")));
    }
    let max_sigma = threshold / 3.0;
    let t2 = threshold * threshold;
    let mut pose = *guess;
    let mut out = Registration { pose, iterations: 0, correspondences: 0, converged: false };
    let mut pairs: Vec<(Vector3<f64>, Vector3<f64>, f64)> = Vec::with_capacity(scan.len());
    for it in 1..=config.max_iters {
        pairs.clear();
        for p in scan {
            let tp = pose.transform(p);
            if let Some((q, d2)) = map.nearest(&tp) {
                if d2 <= t2 {
                    pairs.push((tp, q, d2));
                }
            }
        }
        let count = pairs.len();
        let sigma = if count == 0 {
            max_sigma
        } else {
            let mut d: Vec<f64> = pairs.iter().map(|x| x.2).collect();
            let mid = d.len() / 2;
            let median = d.select_nth_unstable_by(mid, f64::total_cmp).1.sqrt();
            (3.0 * 1.4826 * median).clamp(config.min_kernel.min(max_sigma), max_sigma)
        };
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for (tp, q, d2) in &pairs {
            let r = tp - q;
            let w = gm_weight(*d2, sigma);
            let mut j = nalgebra::Matrix3x6::zeros();
            j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-hat(tp)));
            j.fixed_view_mut::<3, 3>(0, 3).fill_with_identity();
            h += w * j.transpose() * j;
            g += w * j.transpose() * r;
        }
        out.correspondences = count;
        out.iterations = it;
        if count < config.min_correspondences {
            return Err(Error::RegistrationFailed(format!("{count} correspondences")));
        }
        let delta = -h
            .cholesky()
            .ok_or_else(|| Error::RegistrationFailed("singular ICP system".into()))?
            .solve(&g);
        pose = pose.left_update(&delta);
        if delta.amax() < config.tolerance {
            out.converged = true;
            break;
        }
    }
    out.pose = pose;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdomConfig {
    pub voxel: f64,
    pub max_points_per_voxel: usize,
    pub min_threshold: f64,
    pub max_threshold: f64,
    /// Range used to turn a rotation correction into a displacement.
    pub max_range: f64,
    /// Weight of the newest squared deviation in the running mean.
    pub threshold_forgetting: f64,
    pub fix_variance: f64,
    /// Body-to-sensor transform.
    pub extrinsic: Pose,
    pub registration: RegistrationConfig,
}

impl Default for OdomConfig {
    fn default() -> Self {
        Self {
            voxel: 0.5,
            max_points_per_voxel: 20,
            min_threshold: 0.3,
            max_threshold: 3.0,
            max_range: 50.0,
            threshold_forgetting: 0.1,
            fix_variance: 0.05 * 0.05,
            extrinsic: Pose::identity(),
            registration: RegistrationConfig::default(),
        }
    }
}

// Pose has no serde impls; (de)serialize it as a 12-vector.
impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut v: Vec<f64> = self.rotation.as_slice().to_vec();
        v.extend_from_slice(self.translation.as_slice());
        v.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        if v.len() != 12 {
            return Err(serde::de::Error::invalid_length(v.len(), &"12 numbers"));
        }
        Ok(Pose::new(Matrix3::from_column_slice(&v[..9]), Vector3::from_column_slice(&v[9..])))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OdomState {
    pub pose: Pose,
    pub previous: Pose,
    pub threshold: f64,
    /// Running mean of squared model deviations.
    deviation_sq: f64,
    pub scans: u64,
    pub failures: u64,
}

impl OdomState {
    pub fn new(initial: Pose, config: &OdomConfig) -> Self {
        Self { pose: initial, previous: initial, threshold: config.min_threshold, deviation_sq: 0.0, scans: 0, failures: 0 }
    }

    /// Constant-velocity prediction of the next sensor pose.
    pub fn predict(&self) -> Pose {
        self.pose.compose(&self.previous.inverse().compose(&self.pose))
    }
}

/// Updates the running deviation statistics with the correction the ICP
/// applied to the prediction and returns the new threshold `3σ`.
pub fn adapt_threshold(state: &mut OdomState, last_correction: &Pose, config: &OdomConfig) -> f64 {
    let theta = last_correction.angle();
    let dev = last_correction.translation.norm() + 2.0 * config.max_range * (0.5 * theta).sin();
    let a = config.threshold_forgetting;
    state.deviation_sq = (1.0 - a) * state.deviation_sq + a * dev * dev;
    state.threshold = (3.0 * state.deviation_sq.sqrt()).clamp(config.min_threshold, config.max_threshold);
    state.threshold
}

/// Registers one sensor-frame scan against the map and emits a body
/// position fix. On failure the pose follows the constant-velocity
/// prediction and the map is left untouched.
pub fn process_scan(state: &mut OdomState, map: &mut VoxelMap, scan: &PointCloud, config: &OdomConfig) -> Result<OdomFix> {
    scan.validate()?;
    state.scans += 1;
    let predicted = state.predict();
    let frame = downsample(&scan.points, 0.5 * config.voxel);
    let pose = if map.is_empty() {
        state.pose
    } else {
        let source = downsample(&frame, 1.5 * config.voxel);
        match register(map, &source, &predicted, state.threshold, &config.registration) {
            Ok(reg) => {
                let correction = predicted.inverse().compose(&reg.pose);
                adapt_threshold(state, &correction, config);
                reg.pose
            }
            Err(e) => {
                state.failures += 1;
                state.previous = state.pose;
                state.pose = predicted;
                return Err(e);
            }
        }
    };
    let world: Vec<Vector3<f64>> = frame.iter().map(|p| pose.transform(p)).collect();
    map.insert(&world);
    map.remove_far(&pose.translation, config.max_range);
    state.previous = state.pose;
    state.pose = pose;
    let body = pose.compose(&config.extrinsic.inverse());
    Ok(OdomFix { stamp: scan.stamp, position: body.translation, covariance: Matrix3::identity() * config.fix_variance })
}

/// Odometry state and map bundled for single-owner use.
#[derive(Clone, Debug)]
pub struct LidarOdometry {
    pub config: OdomConfig,
    pub state: OdomState,
    pub map: VoxelMap,
}

impl LidarOdometry {
    /// `initial_body` is the body pose at the first scan.
    pub fn new(config: OdomConfig, initial_body: Pose) -> Self {
        let sensor = initial_body.compose(&config.extrinsic);
        let map = VoxelMap::new(config.voxel, config.max_points_per_voxel);
        let state = OdomState::new(sensor, &config);
        Self { config, state, map }
    }

    pub fn process(&mut self, scan: &PointCloud) -> Result<OdomFix> {
        process_scan(&mut self.state, &mut self.map, scan, &self.config)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ScanOutcome {
    Fix(OdomFix),
    Failed { stamp: f64, reason: String },
}

impl ScanOutcome {
    pub fn stamp(&self) -> f64 {
        match self {
            ScanOutcome::Fix(f) => f.stamp,
            ScanOutcome::Failed { stamp, .. } => *stamp,
        }
    }
}

#[derive(Default)]
struct Inbox {
    pending: Option<PointCloud>,
    shutdown: bool,
}

/// Odometry on a dedicated thread. Scans go in through a one-slot inbox
/// (a newer scan replaces an unprocessed one); outcomes come back over a
/// channel.
pub struct LidarWorker {
    inbox: Arc<(Mutex<Inbox>, Condvar)>,
    results: mpsc::Receiver<ScanOutcome>,
    handle: Option<JoinHandle<LidarOdometry>>,
    buffered: Vec<ScanOutcome>,
    dropped: Vec<f64>,
}

impl LidarWorker {
    pub fn spawn(odometry: LidarOdometry) -> Self {
        let inbox: Arc<(Mutex<Inbox>, Condvar)> = Arc::default();
        let (tx, results) = mpsc::channel();
        let worker_inbox = Arc::clone(&inbox);
        let handle = std::thread::Builder::new()
            .name("lidar-odom".into())
            .spawn(move || {
                let mut odom = odometry;
                let (lock, cv) = &*worker_inbox;
                loop {
                    let scan = {
                        let mut inbox = lock.lock().expect("inbox poisoned");
                        while inbox.pending.is_none() && !inbox.shutdown {
                            inbox = cv.wait(inbox).expect("inbox poisoned");
                        }
                        match inbox.pending.take() {
                            Some(scan) => scan,
                            None => break,
                        }
                    };
                    let outcome = match odom.process(&scan) {
                        Ok(fix) => ScanOutcome::Fix(fix),
                        Err(e) => ScanOutcome::Failed { stamp: scan.stamp, reason: e.to_string() },
                    };
                    if tx.send(outcome).is_err() {
                        break;
                    }
                }
                odom
            })
            .expect("failed to spawn lidar worker");
        Self { inbox, results, handle: Some(handle), buffered: Vec::new(), dropped: Vec::new() }
    }

    /// Queues a scan. Returns the stamp of an unprocessed scan it replaced.
    pub fn submit(&mut self, scan: PointCloud) -> Option<f64> {
        let (lock, cv) = &*self.inbox;
        let replaced = lock.lock().expect("inbox poisoned").pending.replace(scan).map(|s| s.stamp);
        cv.notify_one();
        if let Some(s) = replaced {
            self.dropped.push(s);
        }
        replaced
    }

    pub fn dropped(&self) -> &[f64] {
        &self.dropped
    }

    /// Outcomes that are ready now.
    pub fn poll(&mut self) -> Vec<ScanOutcome> {
        let mut out = std::mem::take(&mut self.buffered);
        out.extend(self.results.try_iter());
        out
    }

    /// Blocks until the outcome for the scan stamped `stamp` arrives.
    /// Returns `None` if that scan was dropped or the worker stopped.
    pub fn wait_for(&mut self, stamp: f64) -> Option<ScanOutcome> {
        if self.dropped.contains(&stamp) {
            return None;
        }
        if let Some(i) = self.buffered.iter().position(|o| o.stamp() == stamp) {
            return Some(self.buffered.remove(i));
        }
        while let Ok(o) = self.results.recv() {
            if o.stamp() == stamp {
                return Some(o);
            }
            let later = o.stamp() > stamp;
            self.buffered.push(o);
            if later {
                return None;
            }
        }
        None
    }

    /// Stops the worker after the queued scan and returns the remaining
    /// outcomes and the final odometry.
    pub fn shutdown(mut self) -> (Vec<ScanOutcome>, LidarOdometry) {
        {
            let (lock, cv) = &*self.inbox;
            lock.lock().expect("inbox poisoned").shutdown = true;
            cv.notify_one();
        }
        let odom = self.handle.take().expect("worker joined twice").join().expect("lidar worker panicked");
        let rest = self.poll();
        (rest, odom)
    }
}

impl Drop for LidarWorker {
    fn drop(&mut self) {
        if let Some(h) = self.handle.take() {
            let (lock, cv) = &*self.inbox;
            if let Ok(mut inbox) = lock.lock() {
                inbox.shutdown = true;
            }
            cv.notify_one();
            let _ = h.join();
        }
    }
}

/// Reads `x y z` rows (space or comma separated). Blank lines, `#`
/// comments and a PLY header are skipped.
pub fn read_points<R: BufRead>(reader: R) -> Result<Vec<Vector3<f64>>> {
    let mut points = Vec::new();
    let mut in_header = false;
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if n == 0 && t == "ply" {
            in_header = true;
            continue;
        }
        if in_header {
            in_header = t != "end_header";
            continue;
        }
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = t
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .take(3)
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Data(format!("line {}: {e}", n + 1)))?;
        if vals.len() < 3 {
            return Err(Error::Data(format!("line {}: expected x y z", n + 1)));
        }
        points.push(Vector3::new(vals[0], vals[1], vals[2]));
    }
    Ok(points)
}

pub fn write_points<W: Write>(mut w: W, points: &[Vector3<f64>]) -> Result<()> {
    for p in points {
        writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rv(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
        Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
    }

    /// Points on the faces of a few boxes, a structured cloud ICP can lock on.
    fn structured_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        let boxes = [
            (Vector3::new(-3.0, -3.0, -1.0), Vector3::new(3.0, 3.0, 2.0)),
            (Vector3::new(0.5, -1.0, -1.0), Vector3::new(1.5, 0.2, 0.3)),
            (Vector3::new(-2.0, 1.0, -1.0), Vector3::new(-1.2, 2.2, 1.1)),
        ];
        (0..n)
            .map(|i| {
                let (lo, hi) = boxes[i % boxes.len()];
                let mut p = Vector3::from_fn(|k, _| rng.random_range(lo[k]..hi[k]));
                let axis = rng.random_range(0..3);
                p[axis] = if rng.random_bool(0.5) { lo[axis] } else { hi[axis] };
                p
            })
            .collect()
    }

    fn random_pose(rng: &mut ChaCha8Rng, max_angle: f64, max_t: f64) -> Pose {
        let axis = rv(rng, 1.0).normalize();
        let angle = rng.random_range(0.0..max_angle);
        let dir = rv(rng, 1.0).normalize();
        Pose::new(so3_exp(&(axis * angle)), dir * rng.random_range(0.0..max_t))
    }

    fn map_of(points: &[Vector3<f64>]) -> VoxelMap {
        let mut m = VoxelMap::new(0.5, 1000);
        m.insert(points);
        m
    }

    #[test]
    fn downsample_keeps_first_point_per_voxel() {
        let pts = vec![Vector3::new(0.1, 0.1, 0.1), Vector3::new(0.2, 0.3, 0.4), Vector3::new(0.4, 0.0, 0.2)];
        assert_eq!(downsample(&pts, 0.5), vec![pts[0]]);
        let grid: Vec<_> = (0..27).map(|i| Vector3::new((i % 3) as f64, ((i / 3) % 3) as f64, (i / 9) as f64)).collect();
        assert_eq!(downsample(&grid, 0.5), grid);
    }

    #[test]
    fn downsample_count_matches_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<_> = (0..10_000).map(|_| rv(&mut rng, 2.0)).collect();
        let mut cells: Vec<[i64; 3]> = pts
            .iter()
            .map(|p| [(p.x / 0.5).floor() as i64, (p.y / 0.5).floor() as i64, (p.z / 0.5).floor() as i64])
            .collect();
        cells.sort();
        cells.dedup();
        let out = downsample(&pts, 0.5);
        assert_eq!(out.len(), cells.len());
        assert!(out.iter().all(|p| pts.contains(p)));
    }

    #[test]
    fn map_respects_capacity_and_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = VoxelMap::new(0.5, 20);
        for _ in 0..20 {
            let pts: Vec<_> = (0..500).map(|_| rv(&mut rng, 1.0)).collect();
            m.insert(&pts);
            assert!(m.max_occupancy() <= 20);
            assert!(m.is_consistent());
        }
        m.remove_far(&Vector3::zeros(), 0.6);
        assert!(m.points().all(|p| p.norm() < 0.6 + 0.5 * 3f64.sqrt()));
    }

    #[test]
    fn nearest_matches_brute_force_within_one_voxel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<_> = (0..3000).map(|_| rv(&mut rng, 3.0)).collect();
        let m = map_of(&pts);
        for _ in 0..500 {
            let q = rv(&mut rng, 3.0);
            let brute = pts.iter().map(|p| (p - q).norm_squared()).fold(f64::INFINITY, f64::min);
            if brute.sqrt() < 0.5 {
                assert_eq!(m.nearest(&q).unwrap().1, brute);
            }
        }
    }

    #[test]
    fn identity_scan_registers_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = structured_cloud(&mut rng, 2000);
        let reg = register(&map_of(&pts), &pts, &Pose::identity(), 1.0, &RegistrationConfig::default()).unwrap();
        assert_eq!(reg.iterations, 1);
        assert!(reg.converged);
        assert!((reg.pose.rotation - Matrix3::identity()).amax() < 1e-12);
        assert!(reg.pose.translation.amax() < 1e-12);
    }

    fn recovery_error(reg: &Pose, truth: &Pose) -> (f64, f64) {
        let e = truth.inverse().compose(reg);
        (e.translation.norm(), e.angle())
    }

    #[test]
    fn recovers_known_transform_on_clean_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let pts = structured_cloud(&mut rng, 3000);
            let truth = random_pose(&mut rng, 20f64.to_radians(), 0.3);
            let scan: Vec<_> = pts.iter().map(|p| truth.inverse().transform(p)).collect();
            let reg = register(&map_of(&pts), &scan, &Pose::identity(), 3.0, &RegistrationConfig::default()).unwrap();
            let (et, er) = recovery_error(&reg.pose, &truth);
            assert!(et < 1e-6 && er < 1e-6, "{et} {er} after {}", reg.iterations);
        }
    }

    #[test]
    fn tolerates_uniform_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let pts = structured_cloud(&mut rng, 3000);
            let truth = random_pose(&mut rng, 20f64.to_radians(), 0.3);
            let mut scan: Vec<_> = pts.iter().map(|p| truth.inverse().transform(p)).collect();
            let n_out = scan.len() / 4;
            scan.extend((0..n_out).map(|_| rv(&mut rng, 3.0)));
            let reg = register(&map_of(&pts), &scan, &Pose::identity(), 3.0, &RegistrationConfig::default()).unwrap();
            let (et, _) = recovery_error(&reg.pose, &truth);
            assert!(et < 1e-3, "{et}");
        }
    }

    #[test]
    fn planar_scan_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let plane: Vec<_> = (0..2000).map(|_| Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 0.0)).collect();
        let err = register(&map_of(&plane), &plane, &Pose::identity(), 1.0, &RegistrationConfig::default());
        assert!(matches!(err, Err(Error::RegistrationFailed(_))));

        let mut odom = LidarOdometry::new(OdomConfig::default(), Pose::identity());
        odom.process(&PointCloud::new(plane.clone(), Frame::Sensor, 0.0)).unwrap();
        assert!(odom.process(&PointCloud::new(plane, Frame::Sensor, 0.1)).is_err());
        assert_eq!(odom.state.failures, 1);
    }

    #[test]
    fn too_few_correspondences_fail() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts = structured_cloud(&mut rng, 500);
        let far: Vec<_> = pts.iter().map(|p| p + Vector3::new(100.0, 0.0, 0.0)).collect();
        let err = register(&map_of(&pts), &far, &Pose::identity(), 1.0, &RegistrationConfig::default());
        assert!(matches!(err, Err(Error::RegistrationFailed(m)) if m.contains("correspondences")));
    }

    #[test]
    fn registration_is_left_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // sparse enough that both voxel grids keep every point
        let pts = structured_cloud(&mut rng, 800);
        let truth = random_pose(&mut rng, 0.2, 0.2);
        let scan: Vec<_> = pts.iter().map(|p| truth.inverse().transform(p)).collect();
        let guess = random_pose(&mut rng, 0.05, 0.05);
        let a = random_pose(&mut rng, 1.0, 3.0);
        let cfg = RegistrationConfig { tolerance: 1e-14, max_iters: 30, ..Default::default() };
        let r1 = register(&map_of(&pts), &scan, &guess, 1.0, &cfg).unwrap();
        let moved: Vec<_> = pts.iter().map(|p| a.transform(p)).collect();
        let r2 = register(&map_of(&moved), &scan, &a.compose(&guess), 1.0, &cfg).unwrap();
        let expected = a.compose(&r1.pose);
        assert!((expected.rotation - r2.pose.rotation).amax() < 1e-9);
        assert!((expected.translation - r2.pose.translation).amax() < 1e-9);
    }

    #[test]
    fn threshold_starts_low_saturates_and_decays() {
        let cfg = OdomConfig::default();
        let mut s = OdomState::new(Pose::identity(), &cfg);
        assert_eq!(s.threshold, cfg.min_threshold);
        for _ in 0..50 {
            adapt_threshold(&mut s, &Pose::new(Matrix3::identity(), Vector3::new(5.0, 0.0, 0.0)), &cfg);
        }
        assert_eq!(s.threshold, cfg.max_threshold);
        let mut last = s.threshold;
        let mut steps = 0;
        while s.threshold > cfg.min_threshold {
            adapt_threshold(&mut s, &Pose::identity(), &cfg);
            assert!(s.threshold <= last);
            last = s.threshold;
            steps += 1;
            assert!(steps < 1000);
        }
    }

    #[test]
    fn static_sensor_gives_constant_fixes() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pts = structured_cloud(&mut rng, 4000);
        let start = Pose::new(Matrix3::identity(), Vector3::new(1.0, 2.0, 0.5));
        let mut odom = LidarOdometry::new(OdomConfig::default(), start);
        for k in 0..10 {
            let fix = odom.process(&PointCloud::new(pts.clone(), Frame::Sensor, k as f64 * 0.1)).unwrap();
            assert!((fix.position - start.translation).amax() < 1e-6);
        }
        assert!(odom.map.max_occupancy() <= 20);
    }

    #[test]
    fn worker_matches_inline_processing() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts = structured_cloud(&mut rng, 3000);
        let scans: Vec<PointCloud> = (0..6)
            .map(|k| {
                let pose = Pose::new(so3_exp(&Vector3::new(0.0, 0.0, 0.02 * k as f64)), Vector3::new(0.05 * k as f64, 0.0, 0.0));
                PointCloud::new(pts.iter().map(|p| pose.inverse().transform(p)).collect(), Frame::Sensor, k as f64 * 0.1)
            })
            .collect();
        let mut inline = LidarOdometry::new(OdomConfig::default(), Pose::identity());
        let expected: Vec<_> = scans.iter().map(|s| inline.process(s).unwrap()).collect();

        let mut worker = LidarWorker::spawn(LidarOdometry::new(OdomConfig::default(), Pose::identity()));
        for (s, e) in scans.iter().zip(&expected) {
            assert_eq!(worker.submit(s.clone()), None);
            assert_eq!(worker.wait_for(s.stamp), Some(ScanOutcome::Fix(e.clone())));
        }
        let (rest, odom) = worker.shutdown();
        assert!(rest.is_empty());
        assert_eq!(odom.state.scans, 6);
        assert!((expected[5].position.x - 0.25).abs() < 1e-6);
    }

    #[test]
    fn worker_inbox_keeps_latest_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pts = structured_cloud(&mut rng, 20_000);
        let mut worker = LidarWorker::spawn(LidarOdometry::new(OdomConfig::default(), Pose::identity()));
        let mut dropped = 0;
        for k in 0..20 {
            dropped += worker.submit(PointCloud::new(pts.clone(), Frame::Sensor, k as f64)).is_some() as usize;
        }
        let (rest, odom) = worker.shutdown();
        assert_eq!(odom.state.scans as usize + dropped, 20);
        assert_eq!(rest.len(), odom.state.scans as usize);
        assert_eq!(rest.last().unwrap().stamp(), 19.0);
    }

    #[test]
    fn point_io_roundtrip() {
        let pts = vec![Vector3::new(1.5, -2.0, 0.25), Vector3::new(0.0, 1e-3, 7.0)];
        let mut buf = Vec::new();
        write_points(&mut buf, &pts).unwrap();
        assert_eq!(read_points(buf.as_slice()).unwrap(), pts);
        let ply = "ply\nformat ascii 1.0\nelement vertex 1\nend_header\n1,2,3\n";
        assert_eq!(read_points(ply.as_bytes()).unwrap(), vec![Vector3::new(1.0, 2.0, 3.0)]);
        assert!(read_points("1 2\n".as_bytes()).is_err());
    }
}
