mod common;

#[test]
fn every_differentiable_operation_matches_finite_differences() {
    let suite = common::gradients::gradient_suite();
    assert!(suite.len() >= 16);
    for (name, report) in &suite {
        assert!(report.compared > 0, "{name}: nothing compared");
        assert!(report.passed(), "{name}: relative error {:.3e}", report.max_rel_error);
    }
}

#[test]
fn every_energy_term_is_active_on_the_checked_instance() {
    use attnfield::energy::EnergyConfig;
    use common::gradients::{cloud_around_hand, small_effector, small_pose};
    let hand = small_effector();
    let target = cloud_around_hand(13, 6);
    let q = hand.sample_queries(&small_pose()).unwrap();
    assert!(attnfield::energy::penetration_energy(&target, &q, &hand.radii()) > 0.0);
    assert!(attnfield::energy::self_penetration_energy(&hand, &q, EnergyConfig { delta: 0.03, ..Default::default() }.delta) > 0.0);
    assert!(attnfield::energy::pose_energy(&hand, &small_pose()).unwrap() > 0.0);
}
