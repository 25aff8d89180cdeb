//! Property tests for the algebraic and bookkeeping invariants.

use invariant_legged::config::{ExperimentConfig, Overrides};
use invariant_legged::eval::{ate, rpe, Alignment, LogEntry, TrajectoryLog};
use invariant_legged::kinematics::slip_factor;
use invariant_legged::lidar_odom::VoxelMap;
use invariant_legged::lie::{adjoint, hat, odot, sek3_exp, sek3_log, so3_exp, GroupElement, Tangent};
use invariant_legged::state::{retract, right_invariant_error, RobotState, StateError};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3, Vector6};
use proptest::prelude::*;

fn vec3(scale: f64) -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-scale..scale).prop_map(Vector3::from)
}

/// A tangent with `‖φ‖ ≤ π - 0.1` and `k` columns.
fn tangent(k: usize) -> impl Strategy<Value = Tangent> {
    (vec3(1.0), 0.0..(std::f64::consts::PI - 0.1), prop::collection::vec(vec3(5.0), k)).prop_map(|(axis, angle, xis)| {
        let phi = if axis.norm() > 1e-9 { axis.normalize() * angle } else { Vector3::zeros() };
        Tangent::new(phi, xis)
    })
}

fn element(k: usize) -> impl Strategy<Value = GroupElement> {
    tangent(k).prop_map(|t| sek3_exp(&t))
}

fn state(slots: usize) -> impl Strategy<Value = RobotState> {
    (element(2 + slots), prop::array::uniform6(-0.1f64..0.1)).prop_map(move |(g, b)| {
        let mut s = RobotState::new(*g.rotation(), *g.column(0), *g.column(1), Vector6::from(b), 4, 0.0);
        for leg in 0..slots {
            s.add_contact(leg, *g.column(2 + leg)).unwrap();
        }
        s
    })
}

fn trajectory() -> impl Strategy<Value = Vec<(Matrix3<f64>, Vector3<f64>)>> {
    prop::collection::vec((vec3(0.3), vec3(0.5)), 5..40).prop_map(|steps| {
        let mut r = Matrix3::identity();
        let mut p = Vector3::zeros();
        steps
            .into_iter()
            .map(|(w, dp)| {
                r *= so3_exp(&w);
                p += dp;
                (r, p)
            })
            .collect()
    })
}

fn log_of(poses: &[(Matrix3<f64>, Vector3<f64>)]) -> TrajectoryLog {
    let mut log = TrajectoryLog::default();
    for (i, (r, p)) in poses.iter().enumerate() {
        log.push(LogEntry {
            stamp: i as f64 * 0.1,
            rotation: *r,
            position: *p,
            velocity: Vector3::zeros(),
            bias: Vector6::zeros(),
            covariance: DMatrix::identity(15, 15),
            step_time: 0.0,
        })
        .unwrap();
    }
    log
}

fn truth_of(poses: &[(Matrix3<f64>, Vector3<f64>)]) -> Vec<RobotState> {
    poses
        .iter()
        .enumerate()
        .map(|(i, (r, p))| RobotState::new(*r, Vector3::zeros(), *p, Vector6::zeros(), 4, i as f64 * 0.1))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn exp_log_round_trip(t in (1usize..5).prop_flat_map(tangent)) {
        let back = sek3_log(&sek3_exp(&t));
        prop_assert!((back.to_vector() - t.to_vector()).amax() < 1e-9);
    }

    #[test]
    fn exp_of_negation_is_the_inverse(t in (1usize..5).prop_flat_map(tangent)) {
        let k = t.k();
        let prod = sek3_exp(&t).compose(&sek3_exp(&-&t));
        prop_assert!((prod.to_matrix() - DMatrix::identity(3 + k, 3 + k)).amax() < 1e-10);
    }

    #[test]
    fn vee_inverts_hat(t in (1usize..5).prop_flat_map(tangent)) {
        prop_assert_eq!(Tangent::vee(&t.hat()), t);
    }

    #[test]
    fn inverse_has_transposed_rotation(x in (1usize..5).prop_flat_map(element)) {
        let inv = x.inverse();
        prop_assert!((inv.rotation() - x.rotation().transpose()).amax() < 1e-12);
        let k = x.k();
        prop_assert!((x.compose(&inv).to_matrix() - DMatrix::identity(3 + k, 3 + k)).amax() < 1e-10);
    }

    #[test]
    fn adjoint_conjugates_hat(
        (x, t) in (1usize..5).prop_flat_map(|k| (element(k), tangent(k)))
    ) {
        let lhs = adjoint(&x) * t.to_vector();
        let m = x.to_matrix() * t.hat() * x.inverse().to_matrix();
        let rhs = Tangent::vee(&m).to_vector();
        prop_assert!((lhs - rhs).amax() < 1e-9 * (1.0 + x.to_matrix().amax().powi(2)));
    }

    #[test]
    fn odot_identity(
        (t, b) in (1usize..5).prop_flat_map(|k| (tangent(k), prop::collection::vec(-3.0f64..3.0, 3 + k)))
    ) {
        let b = DVector::from_vec(b);
        prop_assert!((t.hat() * &b - odot(&b) * t.to_vector()).amax() < 1e-12);
    }

    #[test]
    fn retract_inverts_the_error(
        (truth, d) in (0usize..5).prop_flat_map(|n| (state(n), prop::collection::vec(-0.5f64..0.5, 15 + 3 * n)))
    ) {
        let delta = StateError::from_vector(&DVector::from_vec(d)).unwrap();
        let est = retract(&truth, &delta).unwrap();
        let e = right_invariant_error(&est, &truth).unwrap();
        prop_assert!((e.to_vector() - delta.to_vector()).amax() < 1e-9);
    }

    #[test]
    fn contact_slots_never_move_velocity_or_position(s in state(0), feet in prop::collection::vec(vec3(2.0), 4)) {
        let mut s = s;
        let (v, p) = (*s.velocity(), *s.position());
        for (leg, d) in feet.iter().enumerate() {
            s.add_contact(leg, *d).unwrap();
        }
        s.remove_contact(1).unwrap();
        s.remove_contact(3).unwrap();
        prop_assert_eq!((*s.velocity(), *s.position()), (v, p));
        prop_assert_eq!(&s.slot_legs, &vec![0, 2]);
        prop_assert_eq!(*s.foot(1), feet[2]);
    }

    #[test]
    fn hat_is_skew(v in vec3(10.0)) {
        let h = hat(&v);
        prop_assert_eq!(h, -h.transpose());
    }

    #[test]
    fn ate_and_rpe_are_non_negative_and_zero_on_truth(poses in trajectory()) {
        let log = log_of(&poses);
        let gt = truth_of(&poses);
        prop_assert_eq!(ate(&log, &gt, Alignment::None).unwrap(), 0.0);
        prop_assert!(ate(&log, &gt, Alignment::YawTranslation).unwrap() < 1e-9);
        if let Ok(r) = rpe(&log, &gt, 1.0) {
            prop_assert!(r.abs() < 1e-12);
        }
    }

    #[test]
    fn rpe_ignores_a_global_rigid_motion(
        poses in trajectory(),
        noise in prop::collection::vec(vec3(0.05), 40),
        w in vec3(1.0),
        t in vec3(20.0),
    ) {
        let gt = truth_of(&poses);
        let noisy: Vec<_> = poses.iter().zip(&noise).map(|((r, p), n)| (*r, p + n)).collect();
        let g = so3_exp(&w);
        let moved: Vec<_> = noisy.iter().map(|(r, p)| (g * r, g * p + t)).collect();
        let a = rpe(&log_of(&noisy), &gt, 1.0);
        let b = rpe(&log_of(&moved), &gt, 1.0);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert!(a >= 0.0);
                prop_assert!((a - b).abs() < 1e-9 * (1.0 + a), "{a} vs {b}");
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "one of the runs had no 1 m pairs"),
        }
        let ua = ate(&log_of(&noisy), &gt, Alignment::None).unwrap();
        prop_assert!(ua >= 0.0);
    }

    #[test]
    fn slip_factor_is_continuous_and_at_least_one(speed in 0.0f64..5.0, threshold in 0.01f64..1.0) {
        let f = slip_factor(speed, threshold, 100.0);
        prop_assert!((1.0..=100.0).contains(&f));
        let below = slip_factor(threshold * (1.0 - 1e-9), threshold, 100.0);
        let at = slip_factor(threshold, threshold, 100.0);
        prop_assert!((at - below).abs() < 1e-6);
        prop_assert!(slip_factor(speed + 0.1, threshold, 100.0) >= f);
    }

    #[test]
    fn voxel_occupancy_is_bounded(
        points in prop::collection::vec(vec3(3.0), 1..400),
        voxel in 0.2f64..1.5,
        cap in 1usize..8,
    ) {
        let mut map = VoxelMap::new(voxel, cap);
        map.insert(&points);
        map.insert(&points);
        prop_assert!(map.max_occupancy() <= cap);
        prop_assert!(map.is_consistent());
        map.remove_far(&Vector3::zeros(), 2.0);
        prop_assert!(map.is_consistent());
    }

    #[test]
    fn configuration_survives_its_text_form(
        ws in 1usize..30,
        seed in 0u64..1000,
        contact in 1e-4f64..1e-1,
        voxel in 0.1f64..2.0,
        duration in 1.0f64..600.0,
        preset in prop::sample::select(vec!["outdoor", "indoor", "clean"]),
        estimator in prop::sample::select(vec!["pinekf", "einekf", "pis", "eis"]),
    ) {
        let gps = if preset == "indoor" { "off" } else { "on" };
        let ov = Overrides {
            preset: Some(preset.into()),
            estimator: Some(estimator.into()),
            gps: Some(gps.into()),
            window: Some(ws),
            seed: Some(seed),
            ..Overrides::default()
        };
        let mut cfg = ExperimentConfig::load(None, &ov).unwrap();
        cfg.run.filter.noise.contact = contact;
        cfg.run.odometry.voxel = voxel;
        cfg.scenario.duration = duration;
        let text = cfg.to_document().to_string();
        let back = ExperimentConfig::load(Some(&text), &Overrides::default()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
