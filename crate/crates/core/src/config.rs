//! Experiment configuration files.
//!
//! The format is flat `key = value` lines grouped under `[section]` headers.
//! `#` and `;` start a comment line, blank lines are ignored, and a key may
//! appear once per section. Lists are comma separated.
//!
//! ```text
//! [scenario]
//! preset = outdoor
//! duration = 120
//!
//! [run]
//! estimator = eis
//! ws = 10
//!
//! [robot]
//! leg0 = 0.25, 0.06, 0, 0.08, 0.22, 0.22, 1
//! ```
//!
//! Values are resolved in this order, later wins:
//!
//! 1. built-in defaults,
//! 2. the scenario preset (`--scenario NAME`, else `[scenario] preset`,
//!    else `outdoor`),
//! 3. the remaining keys of the file,
//! 4. command-line flags.
//!
//! Terrain, obstacles and slip events come from the preset only.
//!
//! Sections and keys:
//!
//! | section      | keys |
//! |--------------|------|
//! | `scenario`   | preset, duration, imu_rate, lidar_rate, gps_rate, path (line, circle, figure8), radius, speed, body_height, gait_period, gait_duty, step_height, sway_roll, sway_pitch, sway_heave, bias_gyro_sigma, bias_accel_sigma |
//! | `imu`        | gyro, accel, gyro_bias, accel_bias (simulated IMU noise densities) |
//! | `sensors`    | encoder, encoder_rate, encoder_offset (3 values), grf, lidar, lidar_drift, lidar_reported, gps, gps_reported |
//! | `robot`      | mass, `legN` = hip x, hip y, hip z, l1, l2, l3, side |
//! | `run`        | estimator (pinekf, einekf, pis, eis), lidar (off, direct, icp), gps (on, off), ws, seed, perturb_initial, out, streams |
//! | `filter`     | gyro, accel, contact, gyro_bias, accel_bias, init_rotation, init_velocity, init_position, init_gyro_bias, init_accel_bias, joint_noise, chi2_threshold, max_fix_age, slip_threshold, slip_inflation_max, position_jacobian (full, position), max_condition |
//! | `smoother`   | decimation, max_iters, tolerance, swing_foot_variance |
//! | `lidar`      | voxel, max_points_per_voxel, min_threshold, max_threshold, max_range, threshold_forgetting, fix_variance, icp_max_iters, icp_tolerance, min_correspondences, min_spread_ratio, min_kernel |

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::kinematics::{LegModel, RobotModel};
use crate::observations::PositionJacobian;
use crate::runner::{LidarMode, RunConfig, Variant};
use crate::sim::{PathShape, Scenario};

/// Allowed keys per section. `robot` also accepts `legN`.
pub const SCHEMA: &[(&str, &[&str])] = &[
    (
        "scenario",
        &[
            "preset", "duration", "imu_rate", "lidar_rate", "gps_rate", "path", "radius", "speed", "body_height",
            "gait_period", "gait_duty", "step_height", "sway_roll", "sway_pitch", "sway_heave", "bias_gyro_sigma",
            "bias_accel_sigma",
        ],
    ),
    ("imu", &["gyro", "accel", "gyro_bias", "accel_bias"]),
    (
        "sensors",
        &[
            "encoder", "encoder_rate", "encoder_offset", "grf", "lidar", "lidar_drift", "lidar_reported", "gps",
            "gps_reported",
        ],
    ),
    ("robot", &["mass"]),
    ("run", &["estimator", "lidar", "gps", "ws", "seed", "perturb_initial", "out", "streams"]),
    (
        "filter",
        &[
            "gyro", "accel", "contact", "gyro_bias", "accel_bias", "init_rotation", "init_velocity", "init_position",
            "init_gyro_bias", "init_accel_bias", "joint_noise", "chi2_threshold", "max_fix_age", "slip_threshold",
            "slip_inflation_max", "position_jacobian", "max_condition",
        ],
    ),
    ("smoother", &["decimation", "max_iters", "tolerance", "swing_foot_variance"]),
    (
        "lidar",
        &[
            "voxel", "max_points_per_voxel", "min_threshold", "max_threshold", "max_range", "threshold_forgetting",
            "fix_variance", "icp_max_iters", "icp_tolerance", "min_correspondences", "min_spread_ratio", "min_kernel",
        ],
    ),
];

fn leg_index(key: &str) -> Option<usize> {
    key.strip_prefix("leg").and_then(|n| n.parse().ok())
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    value: String,
    /// 1-based source line, 0 for values set programmatically.
    line: usize,
}

/// A parsed configuration file: sections of string values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Document {
    sections: BTreeMap<String, BTreeMap<String, Entry>>,
}

impl Document {
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = Document::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') || s.starts_with(';') {
                continue;
            }
            if let Some(rest) = s.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {line}: unterminated section header")))?
                    .trim();
                if name.is_empty() {
                    return Err(Error::Config(format!("line {line}: empty section name")));
                }
                doc.sections.entry(name.to_string()).or_default();
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`")))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {line}: empty key")));
            }
            let sec = section
                .as_ref()
                .ok_or_else(|| Error::Config(format!("line {line}: `{key}` appears before any section")))?;
            let entries = doc.sections.get_mut(sec).expect("section was inserted");
            if let Some(prev) = entries.get(key) {
                return Err(Error::Config(format!(
                    "line {line}: `{sec}.{key}` already set on line {}",
                    prev.line
                )));
            }
            entries.insert(key.to_string(), Entry { value: value.trim().to_string(), line });
        }
        Ok(doc)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(|e| e.value.as_str())
    }

    /// Sets or replaces a value; used for command-line overrides.
    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), Entry { value: value.into(), line: 0 });
    }

    /// Copies every value of `other` over this document.
    pub fn merge(&mut self, other: &Document) {
        for (sec, entries) in &other.sections {
            let dst = self.sections.entry(sec.clone()).or_default();
            for (k, e) in entries {
                dst.insert(k.clone(), e.clone());
            }
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = (&str, &str)> {
        self.sections
            .iter()
            .flat_map(|(s, e)| e.keys().map(move |k| (s.as_str(), k.as_str())))
    }

    /// Rejects sections and keys that are not in [`SCHEMA`].
    pub fn check_schema(&self) -> Result<()> {
        for (sec, entries) in &self.sections {
            let allowed = SCHEMA
                .iter()
                .find(|(s, _)| s == sec)
                .map(|(_, k)| *k)
                .ok_or_else(|| Error::Config(format!("unknown section [{sec}]")))?;
            for (key, e) in entries {
                let ok = allowed.contains(&key.as_str()) || (sec == "robot" && leg_index(key).is_some());
                if !ok {
                    let at = if e.line > 0 { format!("line {}: ", e.line) } else { String::new() };
                    return Err(Error::Config(format!("{at}unknown key `{key}` in [{sec}]")));
                }
            }
        }
        Ok(())
    }

    fn value<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        let Some(e) = self.sections.get(section).and_then(|s| s.get(key)) else {
            return Ok(None);
        };
        e.value
            .parse()
            .map(Some)
            .map_err(|_| bad_value(section, key, e))
    }

    fn read<T: FromStr>(&self, section: &str, key: &str, target: &mut T) -> Result<()> {
        if let Some(v) = self.value(section, key)? {
            *target = v;
        }
        Ok(())
    }

    fn list(&self, section: &str, key: &str) -> Result<Option<Vec<f64>>> {
        let Some(e) = self.sections.get(section).and_then(|s| s.get(key)) else {
            return Ok(None);
        };
        e.value
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Some)
            .map_err(|_| bad_value(section, key, e))
    }

    fn flag(&self, section: &str, key: &str) -> Result<Option<bool>> {
        let Some(e) = self.sections.get(section).and_then(|s| s.get(key)) else {
            return Ok(None);
        };
        parse_switch(&e.value).map(Some).ok_or_else(|| bad_value(section, key, e))
    }
}

impl fmt::Display for Document {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (sec, entries) in &self.sections {
            if !first {
                writeln!(f)?;
            }
            first = false;
            writeln!(f, "[{sec}]")?;
            for (k, e) in entries {
                writeln!(f, "{k} = {}", e.value)?;
            }
        }
        Ok(())
    }
}

fn bad_value(section: &str, key: &str, e: &Entry) -> Error {
    let at = if e.line > 0 { format!("line {}: ", e.line) } else { String::new() };
    Error::Config(format!("{at}invalid value `{}` for {section}.{key}", e.value))
}

/// `on/off`, `true/false`, `yes/no`, `1/0`.
pub fn parse_switch(s: &str) -> Option<bool> {
    match s.to_ascii_lowercase().as_str() {
        "on" | "true" | "yes" | "1" => Some(true),
        "off" | "false" | "no" | "0" => Some(false),
        _ => None,
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub preset: Option<String>,
    pub estimator: Option<String>,
    pub lidar: Option<String>,
    pub gps: Option<String>,
    pub window: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub streams: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, doc: &mut Document) {
        if let Some(p) = &self.preset {
            doc.set("scenario", "preset", p.clone());
        }
        let run = [
            ("estimator", self.estimator.clone()),
            ("lidar", self.lidar.clone()),
            ("gps", self.gps.clone()),
            ("ws", self.window.map(|w| w.to_string())),
            ("seed", self.seed.map(|s| s.to_string())),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
            ("streams", self.streams.as_ref().map(|p| p.display().to_string())),
        ];
        for (k, v) in run {
            if let Some(v) = v {
                doc.set("run", k, v);
            }
        }
    }
}

/// Everything needed to generate (or load) data and run one estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub robot: RobotModel,
    pub run: RunConfig,
    pub out: Option<PathBuf>,
    /// Directory of pre-recorded streams used instead of the simulator.
    pub streams: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::outdoor(),
            robot: RobotModel::default(),
            run: RunConfig::new(Variant::E_IS),
            out: None,
            streams: None,
        }
    }
}

impl ExperimentConfig {
    /// Resolves a document (file values with overrides already merged).
    pub fn from_document(doc: &Document) -> Result<Self> {
        doc.check_schema()?;
        let preset = doc.get("scenario", "preset").unwrap_or("outdoor");
        let mut cfg = ExperimentConfig { scenario: Scenario::preset(preset)?, ..Self::default() };
        cfg.apply_scenario(doc)?;
        cfg.apply_robot(doc)?;
        cfg.apply_run(doc)?;
        cfg.apply_filter(doc)?;
        cfg.apply_smoother(doc)?;
        cfg.apply_lidar(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `text` (if any), applies `overrides` and resolves.
    pub fn load(text: Option<&str>, overrides: &Overrides) -> Result<Self> {
        let mut doc = match text {
            Some(t) => Document::parse(t)?,
            None => Document::default(),
        };
        overrides.apply(&mut doc);
        Self::from_document(&doc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.streams.is_none() {
            self.scenario.validate()?;
        }
        self.robot.validate()?;
        self.run.filter.validate()?;
        self.run.smoother.validate()?;
        let v = self.run.variant;
        if self.streams.is_none() {
            if v.gps && self.scenario.gps_rate == 0.0 {
                return Err(Error::Config(format!(
                    "{} needs GPS but scenario `{}` has no GPS stream (use --gps off)",
                    v.label(),
                    self.scenario.name
                )));
            }
            if v.lidar != LidarMode::Off && self.scenario.lidar_rate == 0.0 {
                return Err(Error::Config(format!("scenario `{}` has no LiDAR stream", self.scenario.name)));
            }
        }
        Ok(())
    }

    fn apply_scenario(&mut self, d: &Document) -> Result<()> {
        let sc = &mut self.scenario;
        const S: &str = "scenario";
        d.read(S, "duration", &mut sc.duration)?;
        d.read(S, "imu_rate", &mut sc.imu_rate)?;
        d.read(S, "lidar_rate", &mut sc.lidar_rate)?;
        d.read(S, "gps_rate", &mut sc.gps_rate)?;
        d.read(S, "speed", &mut sc.speed)?;
        d.read(S, "body_height", &mut sc.body_height)?;
        d.read(S, "gait_period", &mut sc.gait.period)?;
        d.read(S, "gait_duty", &mut sc.gait.duty)?;
        d.read(S, "step_height", &mut sc.gait.step_height)?;
        d.read(S, "sway_roll", &mut sc.sway[0])?;
        d.read(S, "sway_pitch", &mut sc.sway[1])?;
        d.read(S, "sway_heave", &mut sc.sway[2])?;
        d.read(S, "bias_gyro_sigma", &mut sc.initial_bias_sigma[0])?;
        d.read(S, "bias_accel_sigma", &mut sc.initial_bias_sigma[1])?;
        let radius: Option<f64> = d.value(S, "radius")?;
        let current = match sc.path {
            PathShape::Line => None,
            PathShape::Circle { radius } | PathShape::FigureEight { radius } => Some(radius),
        };
        let shape = d.get(S, "path").map(str::to_string).unwrap_or_else(|| path_name(&sc.path).to_string());
        let r = radius.or(current).unwrap_or(10.0);
        sc.path = match shape.as_str() {
            "line" => PathShape::Line,
            "circle" => PathShape::Circle { radius: r },
            "figure8" => PathShape::FigureEight { radius: r },
            other => return Err(Error::Config(format!("unknown path shape `{other}` (line, circle, figure8)"))),
        };

        let n = &mut sc.imu_noise;
        d.read("imu", "gyro", &mut n.gyro)?;
        d.read("imu", "accel", &mut n.accel)?;
        d.read("imu", "gyro_bias", &mut n.gyro_bias)?;
        d.read("imu", "accel_bias", &mut n.accel_bias)?;

        let s = &mut sc.sensors;
        const N: &str = "sensors";
        d.read(N, "encoder", &mut s.encoder)?;
        d.read(N, "encoder_rate", &mut s.encoder_rate)?;
        if let Some(v) = d.list(N, "encoder_offset")? {
            s.encoder_offset = <[f64; 3]>::try_from(v.as_slice())
                .map_err(|_| Error::Config("sensors.encoder_offset needs 3 values".into()))?;
        }
        d.read(N, "grf", &mut s.grf)?;
        d.read(N, "lidar", &mut s.lidar)?;
        d.read(N, "lidar_drift", &mut s.lidar_drift)?;
        d.read(N, "lidar_reported", &mut s.lidar_reported)?;
        d.read(N, "gps", &mut s.gps)?;
        d.read(N, "gps_reported", &mut s.gps_reported)?;
        Ok(())
    }

    fn apply_robot(&mut self, d: &Document) -> Result<()> {
        d.read("robot", "mass", &mut self.robot.mass)?;
        let mut legs = BTreeMap::new();
        for (sec, key) in d.keys() {
            if sec != "robot" {
                continue;
            }
            let Some(i) = leg_index(key) else { continue };
            let v = d.list("robot", key)?.expect("key exists");
            if v.len() != 7 {
                return Err(Error::Config(format!(
                    "robot.{key} needs 7 values (hip x, hip y, hip z, l1, l2, l3, side), got {}",
                    v.len()
                )));
            }
            legs.insert(
                i,
                LegModel { hip: Vector3::new(v[0], v[1], v[2]), l1: v[3], l2: v[4], l3: v[5], side: v[6] },
            );
        }
        if !legs.is_empty() {
            if legs.keys().copied().ne(0..legs.len()) {
                return Err(Error::Config("robot legs must be numbered leg0, leg1, ... without gaps".into()));
            }
            self.robot.legs = legs.into_values().collect();
        }
        Ok(())
    }

    fn apply_run(&mut self, d: &Document) -> Result<()> {
        const R: &str = "run";
        if let Some(name) = d.get(R, "estimator") {
            self.run.variant = Variant::from_name(name)?;
        }
        if let Some(l) = d.get(R, "lidar") {
            self.run.variant.lidar = l.parse()?;
        }
        if let Some(g) = d.flag(R, "gps")? {
            self.run.variant.gps = g;
        }
        d.read(R, "ws", &mut self.run.smoother.window)?;
        if let Some(seed) = d.value::<u64>(R, "seed")? {
            self.run.seed = seed;
            self.scenario.seed = seed;
        }
        if let Some(p) = d.flag(R, "perturb_initial")? {
            self.run.perturb_initial = p;
        }
        self.out = d.get(R, "out").map(PathBuf::from).or(self.out.take());
        self.streams = d.get(R, "streams").map(PathBuf::from).or(self.streams.take());
        Ok(())
    }

    fn apply_filter(&mut self, d: &Document) -> Result<()> {
        const F: &str = "filter";
        let f = &mut self.run.filter;
        d.read(F, "gyro", &mut f.noise.gyro)?;
        d.read(F, "accel", &mut f.noise.accel)?;
        d.read(F, "contact", &mut f.noise.contact)?;
        d.read(F, "gyro_bias", &mut f.noise.gyro_bias)?;
        d.read(F, "accel_bias", &mut f.noise.accel_bias)?;
        d.read(F, "init_rotation", &mut f.initial.rotation)?;
        d.read(F, "init_velocity", &mut f.initial.velocity)?;
        d.read(F, "init_position", &mut f.initial.position)?;
        d.read(F, "init_gyro_bias", &mut f.initial.gyro_bias)?;
        d.read(F, "init_accel_bias", &mut f.initial.accel_bias)?;
        d.read(F, "joint_noise", &mut f.joint_noise)?;
        d.read(F, "chi2_threshold", &mut f.chi2_threshold)?;
        d.read(F, "max_fix_age", &mut f.max_fix_age)?;
        d.read(F, "slip_threshold", &mut f.slip_threshold)?;
        d.read(F, "slip_inflation_max", &mut f.slip_inflation_max)?;
        d.read(F, "max_condition", &mut f.max_condition)?;
        if let Some(j) = d.get(F, "position_jacobian") {
            f.position_jacobian = match j {
                "full" => PositionJacobian::Full,
                "position" => PositionJacobian::PositionOnly,
                other => return Err(Error::Config(format!("unknown position_jacobian `{other}` (full, position)"))),
            };
        }
        Ok(())
    }

    fn apply_smoother(&mut self, d: &Document) -> Result<()> {
        const M: &str = "smoother";
        let s = &mut self.run.smoother;
        d.read(M, "decimation", &mut s.decimation)?;
        d.read(M, "max_iters", &mut s.max_iters)?;
        d.read(M, "tolerance", &mut s.tolerance)?;
        d.read(M, "swing_foot_variance", &mut s.swing_foot_variance)?;
        Ok(())
    }

    fn apply_lidar(&mut self, d: &Document) -> Result<()> {
        const L: &str = "lidar";
        let o = &mut self.run.odometry;
        d.read(L, "voxel", &mut o.voxel)?;
        d.read(L, "max_points_per_voxel", &mut o.max_points_per_voxel)?;
        d.read(L, "min_threshold", &mut o.min_threshold)?;
        d.read(L, "max_threshold", &mut o.max_threshold)?;
        d.read(L, "max_range", &mut o.max_range)?;
        d.read(L, "threshold_forgetting", &mut o.threshold_forgetting)?;
        d.read(L, "fix_variance", &mut o.fix_variance)?;
        d.read(L, "icp_max_iters", &mut o.registration.max_iters)?;
        d.read(L, "icp_tolerance", &mut o.registration.tolerance)?;
        d.read(L, "min_correspondences", &mut o.registration.min_correspondences)?;
        d.read(L, "min_spread_ratio", &mut o.registration.min_spread_ratio)?;
        d.read(L, "min_kernel", &mut o.registration.min_kernel)?;
        Ok(())
    }

    /// The full configuration as a document that resolves back to `self`.
    pub fn to_document(&self) -> Document {
        let mut d = scenario_document(&self.scenario);
        d.set("robot", "mass", self.robot.mass.to_string());
        for (i, l) in self.robot.legs.iter().enumerate() {
            d.set(
                "robot",
                &format!("leg{i}"),
                join(&[l.hip.x, l.hip.y, l.hip.z, l.l1, l.l2, l.l3, l.side]),
            );
        }
        let r = &self.run;
        let v = r.variant;
        let name = match (v.kind, v.exteroceptive()) {
            (crate::runner::EstimatorKind::Filter, false) => "pinekf",
            (crate::runner::EstimatorKind::Filter, true) => "einekf",
            (crate::runner::EstimatorKind::Smoother, false) => "pis",
            (crate::runner::EstimatorKind::Smoother, true) => "eis",
        };
        d.set("run", "estimator", name);
        d.set("run", "lidar", v.lidar.to_string());
        d.set("run", "gps", if v.gps { "on" } else { "off" });
        d.set("run", "ws", r.smoother.window.to_string());
        d.set("run", "seed", r.seed.to_string());
        d.set("run", "perturb_initial", r.perturb_initial.to_string());
        if let Some(o) = &self.out {
            d.set("run", "out", o.display().to_string());
        }
        if let Some(s) = &self.streams {
            d.set("run", "streams", s.display().to_string());
        }
        let f = &r.filter;
        let filter = [
            ("gyro", f.noise.gyro),
            ("accel", f.noise.accel),
            ("contact", f.noise.contact),
            ("gyro_bias", f.noise.gyro_bias),
            ("accel_bias", f.noise.accel_bias),
            ("init_rotation", f.initial.rotation),
            ("init_velocity", f.initial.velocity),
            ("init_position", f.initial.position),
            ("init_gyro_bias", f.initial.gyro_bias),
            ("init_accel_bias", f.initial.accel_bias),
            ("joint_noise", f.joint_noise),
            ("chi2_threshold", f.chi2_threshold),
            ("max_fix_age", f.max_fix_age),
            ("slip_threshold", f.slip_threshold),
            ("slip_inflation_max", f.slip_inflation_max),
            ("max_condition", f.max_condition),
        ];
        for (k, x) in filter {
            d.set("filter", k, x.to_string());
        }
        let pj = match f.position_jacobian {
            PositionJacobian::Full => "full",
            PositionJacobian::PositionOnly => "position",
        };
        d.set("filter", "position_jacobian", pj);
        let s = &r.smoother;
        d.set("smoother", "decimation", s.decimation.to_string());
        d.set("smoother", "max_iters", s.max_iters.to_string());
        d.set("smoother", "tolerance", s.tolerance.to_string());
        d.set("smoother", "swing_foot_variance", s.swing_foot_variance.to_string());
        let o = &r.odometry;
        d.set("lidar", "voxel", o.voxel.to_string());
        d.set("lidar", "max_points_per_voxel", o.max_points_per_voxel.to_string());
        d.set("lidar", "min_threshold", o.min_threshold.to_string());
        d.set("lidar", "max_threshold", o.max_threshold.to_string());
        d.set("lidar", "max_range", o.max_range.to_string());
        d.set("lidar", "threshold_forgetting", o.threshold_forgetting.to_string());
        d.set("lidar", "fix_variance", o.fix_variance.to_string());
        d.set("lidar", "icp_max_iters", o.registration.max_iters.to_string());
        d.set("lidar", "icp_tolerance", o.registration.tolerance.to_string());
        d.set("lidar", "min_correspondences", o.registration.min_correspondences.to_string());
        d.set("lidar", "min_spread_ratio", o.registration.min_spread_ratio.to_string());
        d.set("lidar", "min_kernel", o.registration.min_kernel.to_string());
        d
    }
}

fn join(v: &[f64]) -> String {
    let mut s = String::new();
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        let _ = write!(s, "{x}");
    }
    s
}

fn path_name(p: &PathShape) -> &'static str {
    match p {
        PathShape::Line => "line",
        PathShape::Circle { .. } => "circle",
        PathShape::FigureEight { .. } => "figure8",
    }
}

/// The `[scenario]`, `[imu]` and `[sensors]` sections describing `sc`. The
/// scenario name must be a preset, which supplies terrain and obstacles.
pub fn scenario_document(sc: &Scenario) -> Document {
    let mut d = Document::default();
    let mut put = |k: &str, v: String| d.set("scenario", k, v);
    put("preset", sc.name.clone());
    put("duration", sc.duration.to_string());
    put("imu_rate", sc.imu_rate.to_string());
    put("lidar_rate", sc.lidar_rate.to_string());
    put("gps_rate", sc.gps_rate.to_string());
    put("path", path_name(&sc.path).to_string());
    if let PathShape::Circle { radius } | PathShape::FigureEight { radius } = sc.path {
        put("radius", radius.to_string());
    }
    put("speed", sc.speed.to_string());
    put("body_height", sc.body_height.to_string());
    put("gait_period", sc.gait.period.to_string());
    put("gait_duty", sc.gait.duty.to_string());
    put("step_height", sc.gait.step_height.to_string());
    put("sway_roll", sc.sway[0].to_string());
    put("sway_pitch", sc.sway[1].to_string());
    put("sway_heave", sc.sway[2].to_string());
    put("bias_gyro_sigma", sc.initial_bias_sigma[0].to_string());
    put("bias_accel_sigma", sc.initial_bias_sigma[1].to_string());
    let n = &sc.imu_noise;
    for (k, v) in [("gyro", n.gyro), ("accel", n.accel), ("gyro_bias", n.gyro_bias), ("accel_bias", n.accel_bias)] {
        d.set("imu", k, v.to_string());
    }
    let s = &sc.sensors;
    let sensors = [
        ("encoder", s.encoder),
        ("encoder_rate", s.encoder_rate),
        ("grf", s.grf),
        ("lidar", s.lidar),
        ("lidar_drift", s.lidar_drift),
        ("lidar_reported", s.lidar_reported),
        ("gps", s.gps),
        ("gps_reported", s.gps_reported),
    ];
    for (k, v) in sensors {
        d.set("sensors", k, v.to_string());
    }
    d.set("sensors", "encoder_offset", join(&s.encoder_offset));
    d
}

/// Applies a scenario file (sections `scenario`, `imu`, `sensors`) to its preset.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let doc = Document::parse(text)?;
    for (sec, _) in doc.keys() {
        if !matches!(sec, "scenario" | "imu" | "sensors") {
            return Err(Error::Config(format!("section [{sec}] does not belong in a scenario file")));
        }
    }
    doc.check_schema()?;
    let mut cfg = ExperimentConfig {
        scenario: Scenario::preset(doc.get("scenario", "preset").unwrap_or("outdoor"))?,
        ..ExperimentConfig::default()
    };
    cfg.apply_scenario(&doc)?;
    cfg.scenario.validate()?;
    Ok(cfg.scenario)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_comments_and_lists() {
        let doc = Document::parse(
            "# comment\n[scenario]\npreset = indoor\n\n; other\n[sensors]\nencoder_offset = 0, 0.01 , 0.02\n",
        )
        .unwrap();
        assert_eq!(doc.get("scenario", "preset"), Some("indoor"));
        assert_eq!(doc.list("sensors", "encoder_offset").unwrap(), Some(vec![0.0, 0.01, 0.02]));
    }

    #[test]
    fn syntax_errors_name_the_line() {
        for (text, needle) in [
            ("[run\n", "line 1"),
            ("seed = 1\n", "before any section"),
            ("[run]\nseed\n", "line 2"),
            ("[run]\nseed = 1\nseed = 2\n", "already set on line 2"),
        ] {
            let err = Document::parse(text).unwrap_err().to_string();
            assert!(err.contains(needle), "{text:?}: {err}");
        }
    }

    #[test]
    fn schema_rejects_unknown_keys_and_sections() {
        let err = ExperimentConfig::load(Some("[run]\nwindow = 3\n"), &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("unknown key `window`"), "{err}");
        let err = ExperimentConfig::load(Some("[runs]\nws = 3\n"), &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("unknown section"), "{err}");
        let err = ExperimentConfig::load(Some("[run]\nws = three\n"), &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("invalid value `three`"), "{err}");
    }

    #[test]
    fn schema_matches_the_writer() {
        // Every schema key is emitted for a configuration using all features,
        // and everything emitted passes the schema.
        let mut cfg = ExperimentConfig::default();
        cfg.out = Some("out".into());
        cfg.streams = Some("streams".into());
        let doc = cfg.to_document();
        doc.check_schema().unwrap();
        for (sec, keys) in SCHEMA {
            for k in *keys {
                assert!(doc.get(sec, k).is_some(), "{sec}.{k} not written");
            }
        }
    }

    #[test]
    fn written_config_resolves_to_itself() {
        let mut cfg = ExperimentConfig::load(
            Some("[scenario]\npreset = indoor\nduration = 12.5\n[run]\nestimator = pis\nws = 4\nseed = 9\n[robot]\nmass = 31\n[filter]\ncontact = 0.003\n"),
            &Overrides::default(),
        )
        .unwrap();
        cfg.run.odometry.voxel = 0.37;
        cfg.run.smoother.tolerance = 3.3e-7;
        let text = cfg.to_document().to_string();
        let back = ExperimentConfig::load(Some(&text), &Overrides::default()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.scenario.duration, 12.5);
        assert_eq!(back.scenario.seed, 9);
        assert_eq!(back.run.variant, Variant::P_IS);
    }

    #[test]
    fn command_line_overrides_file_and_file_overrides_preset() {
        let text = "[scenario]\npreset = outdoor\nduration = 20\n[run]\nestimator = einekf\nseed = 3\nws = 7\n";
        let cfg = ExperimentConfig::load(Some(text), &Overrides::default()).unwrap();
        assert_eq!(cfg.scenario.duration, 20.0);
        assert_eq!(cfg.run.variant, Variant::E_INEKF);
        assert_eq!(cfg.run.smoother.window, 7);

        let ov = Overrides {
            preset: Some("clean".into()),
            estimator: Some("eis".into()),
            gps: Some("off".into()),
            window: Some(2),
            seed: Some(11),
            ..Overrides::default()
        };
        let cfg = ExperimentConfig::load(Some(text), &ov).unwrap();
        // CLI preset replaces the file's preset; file keys still apply on top.
        assert_eq!(cfg.scenario.name, "clean");
        assert_eq!(cfg.scenario.duration, 20.0);
        assert_eq!(cfg.run.variant, Variant::E_IS_NO_GPS);
        assert_eq!(cfg.run.smoother.window, 2);
        assert_eq!((cfg.run.seed, cfg.scenario.seed), (11, 11));
    }

    #[test]
    fn gps_needs_a_gps_stream() {
        let ov = Overrides { preset: Some("indoor".into()), estimator: Some("eis".into()), ..Overrides::default() };
        let err = ExperimentConfig::load(None, &ov).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("needs GPS")), "{err}");
        let ov = Overrides { gps: Some("off".into()), ..ov };
        assert!(ExperimentConfig::load(None, &ov).is_ok());
    }

    #[test]
    fn legs_come_from_the_file() {
        let text = "[robot]\nleg0 = 0.3, 0.1, 0, 0.05, 0.2, 0.25, 1\nleg1 = 0.3, -0.1, 0, 0.05, 0.2, 0.25, -1\n";
        let cfg = ExperimentConfig::load(Some(text), &Overrides::default()).unwrap();
        assert_eq!(cfg.robot.legs.len(), 2);
        assert_eq!(cfg.robot.legs[1].hip, Vector3::new(0.3, -0.1, 0.0));
        assert_eq!(cfg.robot.legs[0].l3, 0.25);

        let gap = "[robot]\nleg0 = 0.3, 0.1, 0, 0.05, 0.2, 0.25, 1\nleg2 = 0.3, -0.1, 0, 0.05, 0.2, 0.25, -1\n";
        assert!(ExperimentConfig::load(Some(gap), &Overrides::default()).is_err());
        let short = "[robot]\nleg0 = 0.3, 0.1, 0\n";
        assert!(ExperimentConfig::load(Some(short), &Overrides::default()).is_err());
        let side = "[robot]\nleg0 = 0.3, 0.1, 0, 0.05, 0.2, 0.25, 2\n";
        assert!(ExperimentConfig::load(Some(side), &Overrides::default()).is_err());
    }

    #[test]
    fn scenario_round_trips_through_text() {
        for name in ["outdoor", "indoor", "clean"] {
            let mut sc = Scenario::preset(name).unwrap();
            sc.duration = 42.0;
            sc.sensors.encoder_offset = [0.001, -0.002, 0.003];
            sc.path = PathShape::FigureEight { radius: 7.5 };
            let text = scenario_document(&sc).to_string();
            let mut back = parse_scenario(&text).unwrap();
            back.seed = sc.seed;
            assert_eq!(back, sc, "{name}");
        }
        assert!(parse_scenario("[run]\nws = 1\n").is_err());
    }
}
