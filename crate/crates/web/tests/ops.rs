use serde_json::Value;
use snsqkd_web::{interference_json, rate_curve_json, replay_json};

#[test]
fn rate_curve_has_one_point_per_step() {
    let v: Value = serde_json::from_str(&rate_curve_json(100.0, 500.0, 9, 0.185, 0).unwrap()).unwrap();
    let pts = v.as_array().unwrap();
    assert_eq!(pts.len(), 9);
    let rates: Vec<f64> = pts.iter().map(|p| p["rate"].as_f64().unwrap()).collect();
    assert!(rates.windows(2).all(|w| w[1] <= w[0]));
    assert!(pts.iter().all(|p| p["plob_absolute"].as_f64().unwrap() > 0.0));
}

#[test]
fn rate_curve_rejects_empty_grid() {
    assert!(rate_curve_json(100.0, 500.0, 0, 0.185, 0).is_err());
    assert!(rate_curve_json(500.0, 100.0, 5, 0.185, 0).is_err());
}

#[test]
fn interference_fringes_are_complementary() {
    let v: Value = serde_json::from_str(&interference_json(0.1, 0.1, 50.0, 181).unwrap()).unwrap();
    let left: Vec<f64> = v["left"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    let right: Vec<f64> = v["right"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(left.len(), 181);
    // In phase everything exits on one port; half a period later on the other.
    assert!(right[0] > 10.0 * left[0]);
    assert!(left[90] > 10.0 * right[90]);
}

#[test]
fn replay_reports_positive_key() {
    let v: Value = serde_json::from_str(&replay_json("multiplicative", false, false).unwrap()).unwrap();
    let r = v["rate"].as_f64().unwrap();
    assert!(r > 4.0e-8 && r < 6.0e-8, "{r}");
    assert!(v["reason"].is_null());
    let kl: Value = serde_json::from_str(&replay_json("kl", false, false).unwrap()).unwrap();
    assert!(kl["rate"].as_f64().unwrap() > 0.0);
    assert!(replay_json("nonsense", false, false).is_err());
}
