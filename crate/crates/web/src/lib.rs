//! Browser demo bindings.
//!
//! Three operations, each returning a JSON string for the page to plot:
//! [`estimate`] simulates a walk and runs one estimator, [`icp_demo`]
//! registers a synthetic scan against a room map, and [`uncertainty`]
//! compares the position and yaw spread of the proprioceptive and
//! exteroceptive filters over time.

use invariant_legged::kinematics::RobotModel;
use invariant_legged::lidar_odom::{register, Pose, RegistrationConfig, VoxelMap};
use invariant_legged::lie::so3_exp;
use invariant_legged::runner::{self, RunConfig, RunLabel, Variant};
use invariant_legged::sim::{generate, LidarOutput, Scenario};
use invariant_legged::{Error, Result};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Longest series handed to the page.
const MAX_POINTS: usize = 400;

fn every_nth<T: Clone>(v: &[T], max: usize) -> Vec<T> {
    let step = v.len().div_ceil(max).max(1);
    v.iter().step_by(step).cloned().collect()
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

#[derive(Serialize)]
pub struct Estimate {
    pub label: String,
    pub truth: Vec<[f64; 3]>,
    pub estimate: Vec<[f64; 3]>,
    pub ate: f64,
    pub final_error: [f64; 3],
}

fn scenario(preset: &str, duration: f64, seed: u64) -> Result<Scenario> {
    let mut sc = Scenario::preset(preset)?;
    if !(duration > 0.0 && duration <= 600.0) {
        return Err(Error::Config(format!("duration {duration} s is outside (0, 600]")));
    }
    sc.duration = duration;
    sc.seed = seed;
    Ok(sc)
}

pub fn run_estimate(preset: &str, estimator: &str, gps: bool, window: usize, duration: f64, seed: u64) -> Result<Estimate> {
    let sc = scenario(preset, duration, seed)?;
    let mut variant = Variant::from_name(estimator)?;
    variant.gps = gps && variant.exteroceptive();
    if variant.gps && sc.gps_rate == 0.0 {
        return Err(Error::Config(format!("scenario `{preset}` has no GPS")));
    }
    let model = RobotModel::default();
    let cfg = RunConfig { seed, ..RunConfig::new(variant) }.with_window(window.max(1));
    let data = generate(&sc, &model, LidarOutput::Fixes)?;
    let out = runner::run(&data, &model, &cfg)?;
    let m = runner::evaluate(&out, &data, &cfg, &RunLabel { scenario: sc.name.clone(), seed })?;
    let truth: Vec<[f64; 3]> = data.truth.iter().map(|s| (*s.position()).into()).collect();
    let estimate: Vec<[f64; 3]> = out.log.entries.iter().map(|e| e.position.into()).collect();
    Ok(Estimate {
        label: m.estimator,
        truth: every_nth(&truth, MAX_POINTS),
        estimate: every_nth(&estimate, MAX_POINTS),
        ate: m.ate,
        final_error: m.final_error,
    })
}

/// Simulates `duration` s of `preset` and runs `estimator` (pinekf, einekf,
/// pis or eis). `window` is the smoother window size.
#[wasm_bindgen]
pub fn estimate(preset: &str, estimator: &str, gps: bool, window: usize, duration: f64, seed: u64) -> std::result::Result<String, String> {
    run_estimate(preset, estimator, gps, window, duration, seed).map(|e| to_json(&e)).map_err(|e| e.to_string())
}

#[derive(Serialize)]
pub struct IcpResult {
    /// Top-down map points.
    pub map: Vec<[f64; 2]>,
    /// Scan in the map frame before and after registration.
    pub before: Vec<[f64; 2]>,
    pub after: Vec<[f64; 2]>,
    pub outliers: usize,
    pub converged: bool,
    pub message: String,
    pub translation_error: f64,
    pub rotation_error_deg: f64,
}

/// Points drawn uniformly on the floor, walls and three blocks of a
/// 7.6 m square room. Random sampling avoids the self-similar lattice a
/// single ray-cast sweep would produce.
fn room_cloud(rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let mut pts = Vec::new();
    let mut face = |rng: &mut ChaCha8Rng, origin: Vector3<f64>, u: Vector3<f64>, v: Vector3<f64>, n: usize| {
        for _ in 0..n {
            pts.push(origin + u * rng.random_range(0.0..1.0) + v * rng.random_range(0.0..1.0));
        }
    };
    let (x, y, z) = (Vector3::x(), Vector3::y(), Vector3::z());
    face(rng, Vector3::new(-3.8, -3.8, -0.5), x * 7.6, y * 7.6, 1500);
    face(rng, Vector3::new(-3.8, -3.8, -0.5), x * 7.6, z * 3.0, 600);
    face(rng, Vector3::new(-3.8, 3.8, -0.5), x * 7.6, z * 3.0, 600);
    face(rng, Vector3::new(-3.8, -3.8, -0.5), y * 7.6, z * 3.0, 600);
    face(rng, Vector3::new(3.8, -3.8, -0.5), y * 7.6, z * 3.0, 600);
    for (lo, hi) in [([1.0, -1.5], [2.0, -0.5, 0.6]), ([-2.5, 1.0], [-1.5, 2.5, 1.2]), ([-0.8, -3.0], [0.4, -2.2, 0.3])] {
        let (w, d, h) = (hi[0] - lo[0], hi[1] - lo[1], hi[2] + 0.5);
        let base = Vector3::new(lo[0], lo[1], -0.5);
        face(rng, base, x * w, z * h, 100);
        face(rng, base + y * d, x * w, z * h, 100);
        face(rng, base, y * d, z * h, 100);
        face(rng, base + x * w, y * d, z * h, 100);
        face(rng, base + z * h, x * w, y * d, 100);
    }
    pts
}

fn top_down(points: &[Vector3<f64>]) -> Vec<[f64; 2]> {
    every_nth(points, 1500).iter().map(|p| [p.x, p.y]).collect()
}

/// Samples a room, moves the scan by a yaw of `yaw_deg` and a planar shift of
/// `shift` m, adds a fraction `outliers` of random points and registers it
/// back onto the map.
pub fn run_icp(yaw_deg: f64, shift: f64, outliers: f64, seed: u64) -> Result<IcpResult> {
    if !(0.0..=0.5).contains(&outliers) {
        return Err(Error::Config("outlier fraction must lie in [0, 0.5]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = room_cloud(&mut rng);
    let mut map = VoxelMap::new(0.5, 1000);
    map.insert(&points);

    let heading = rng.random_range(0.0..std::f64::consts::TAU);
    let truth = Pose::new(so3_exp(&Vector3::new(0.0, 0.0, yaw_deg.to_radians())), Vector3::new(heading.cos(), heading.sin(), 0.0) * shift);
    let mut scan: Vec<Vector3<f64>> = points.iter().map(|p| truth.inverse().transform(p)).collect();
    let n_out = (scan.len() as f64 * outliers / (1.0 - outliers)).round() as usize;
    for _ in 0..n_out {
        scan.push(Vector3::new(rng.random_range(-3.8..3.8), rng.random_range(-3.8..3.8), rng.random_range(-0.5..2.5)));
    }
    let before = top_down(&scan);
    let (pose, converged, message) = match register(&map, &scan, &Pose::identity(), 3.0, &RegistrationConfig::default()) {
        Ok(r) => (r.pose, true, String::from("converged")),
        Err(e) => (Pose::identity(), false, e.to_string()),
    };
    let moved: Vec<Vector3<f64>> = scan.iter().map(|p| pose.transform(p)).collect();
    let err = truth.inverse().compose(&pose);
    Ok(IcpResult {
        map: top_down(&points),
        before,
        after: top_down(&moved),
        outliers: n_out,
        converged,
        message,
        translation_error: err.translation.norm(),
        rotation_error_deg: err.angle().to_degrees(),
    })
}

#[wasm_bindgen]
pub fn icp_demo(yaw_deg: f64, shift: f64, outliers: f64, seed: u64) -> std::result::Result<String, String> {
    run_icp(yaw_deg, shift, outliers, seed).map(|r| to_json(&r)).map_err(|e| e.to_string())
}

#[derive(Serialize)]
pub struct Spread {
    pub label: String,
    pub time: Vec<f64>,
    /// One-sigma horizontal position, vertical position and yaw (deg).
    pub horizontal: Vec<f64>,
    pub vertical: Vec<f64>,
    pub yaw_deg: Vec<f64>,
}

/// Runs P-InEKF and E-InEKF on the outdoor scenario and returns their
/// one-sigma bounds over time.
pub fn run_uncertainty(duration: f64, seed: u64) -> Result<Vec<Spread>> {
    let sc = scenario("outdoor", duration, seed)?;
    let model = RobotModel::default();
    let data = generate(&sc, &model, LidarOutput::Fixes)?;
    let mut result = Vec::new();
    for v in [Variant::P_INEKF, Variant::E_INEKF] {
        let out = runner::run(&data, &model, &RunConfig::new(v))?;
        let entries = every_nth(&out.log.entries, MAX_POINTS);
        result.push(Spread {
            label: v.label(),
            time: entries.iter().map(|e| e.stamp).collect(),
            horizontal: entries.iter().map(|e| (e.covariance[(6, 6)] + e.covariance[(7, 7)]).sqrt()).collect(),
            vertical: entries.iter().map(|e| e.covariance[(8, 8)].sqrt()).collect(),
            yaw_deg: entries.iter().map(|e| e.covariance[(2, 2)].sqrt().to_degrees()).collect(),
        });
    }
    Ok(result)
}

#[wasm_bindgen]
pub fn uncertainty(duration: f64, seed: u64) -> std::result::Result<String, String> {
    run_uncertainty(duration, seed).map(|r| to_json(&r)).map_err(|e| e.to_string())
}
