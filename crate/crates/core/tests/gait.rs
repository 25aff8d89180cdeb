//! The smoother must stay exact on noise-free data across touchdowns and
//! liftoffs that fall between keyframes.

use invariant_legged::kinematics::RobotModel;
use invariant_legged::runner::{self, RunConfig, Variant};
use invariant_legged::sim::{generate, LidarOutput, Scenario};

#[test]
fn noise_free_smoother_is_exact_through_gait_events() {
    let model = RobotModel::default();
    let mut sc = Scenario::clean();
    sc.duration = 5.0;
    let data = generate(&sc, &model, LidarOutput::Fixes).unwrap();
    for ws in [1, 4] {
        let out = runner::run(&data, &model, &RunConfig::new(Variant::P_IS).with_window(ws)).unwrap();
        let worst = out
            .log
            .entries
            .iter()
            .map(|e| (e.position - data.truth[(e.stamp / data.dt).round() as usize].position()).norm())
            .fold(0.0, f64::max);
        assert!(worst < 1e-9, "WS={ws}: position error {worst:e}");
    }
}
