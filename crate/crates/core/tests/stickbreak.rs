#[allow(unused_imports)]
use nalgebra::{DMatrix, DVector};
use rslds::stickbreak::*;

#[test]
fn kappa_patterns() {
    let (_, first) = stick_targets(0, 3);
    assert_eq!(first.as_slice(), &[0.5, 0.0, 0.0]);
    let (a, last) = stick_targets(3, 3);
    assert_eq!(last.as_slice(), &[-0.5, -0.5, -0.5]);
    assert_eq!(a.as_slice(), &[1.0, 1.0, 1.0]);
}

#[test]
fn single_state_link_is_point_mass() {
    assert_eq!(pi_sb(&[]).as_slice(), &[1.0]);
    assert_eq!(log_pmf(0, &[]), 0.0);
}

#[test]
fn saturated_logits_stay_finite() {
    let lp = log_pmf(3, &[50.0, 50.0, 50.0]);
    assert!((lp + 150.0).abs() < 1e-12);
    assert!(log_pmf(0, &[-1000.0]).is_finite());
    assert!((log_pmf(0, &[-1000.0]) + 1000.0).abs() < 1e-9);
}
