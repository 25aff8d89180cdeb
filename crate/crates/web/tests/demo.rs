use invariant_legged_web::{estimate, icp_demo, uncertainty};
use serde_json::Value;

fn parse(s: Result<String, String>) -> Value {
    serde_json::from_str(&s.expect("call succeeds")).unwrap()
}

#[test]
fn estimate_returns_both_trajectories() {
    let v = parse(estimate("clean", "eis", true, 3, 5.0, 1));
    assert_eq!(v["label"], "E-IS");
    let truth = v["truth"].as_array().unwrap();
    assert!(!truth.is_empty() && truth.len() <= 400);
    assert_eq!(truth[0].as_array().unwrap().len(), 3);
    assert!(v["ate"].as_f64().unwrap() < 1e-3);
}

#[test]
fn estimate_rejects_bad_requests() {
    assert!(estimate("clean", "ukf", false, 1, 5.0, 1).unwrap_err().contains("unknown estimator"));
    assert!(estimate("indoor", "einekf", true, 1, 5.0, 1).unwrap_err().contains("no GPS"));
    assert!(estimate("clean", "pinekf", false, 1, -1.0, 1).is_err());
}

#[test]
fn icp_demo_recovers_the_motion() {
    let v = parse(icp_demo(15.0, 0.25, 0.0, 4));
    assert_eq!(v["converged"], true);
    assert!(v["translation_error"].as_f64().unwrap() < 1e-6);
    let v = parse(icp_demo(10.0, 0.2, 0.2, 4));
    assert!(v["outliers"].as_u64().unwrap() > 0);
    assert!(v["translation_error"].as_f64().unwrap() < 1e-3);
    assert!(icp_demo(0.0, 0.0, 0.9, 4).is_err());
}

#[test]
fn exteroceptive_filter_bounds_the_spread() {
    let v = parse(uncertainty(20.0, 2));
    let runs = v.as_array().unwrap();
    assert_eq!(runs[0]["label"], "P-InEKF");
    let last = |i: usize, key: &str| *runs[i][key].as_array().unwrap().last().unwrap().as_f64().as_ref().unwrap();
    assert!(last(0, "horizontal") > 2.0 * last(1, "horizontal"));
    assert!(last(0, "yaw_deg") > last(1, "yaw_deg"));
}
