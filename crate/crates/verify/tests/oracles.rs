use sril_verify::{gradients, mask, metrics, protocol, Report};

fn assert_all(checks: Vec<sril_verify::Check>) {
    let report = Report { checks };
    assert!(report.all_passed(), "{report}");
}

#[test]
fn every_op_matches_finite_differences() {
    let checks = gradients::check_all_ops();
    assert_eq!(checks.len(), sril_core::OpKind::DIFFERENTIABLE.len());
    assert_all(checks);
}

#[test]
fn model_losses_match_finite_differences() {
    assert_all(gradients::check_model_losses(1));
    assert_all(gradients::check_conv_model(1));
}

#[test]
fn mask_matches_finite_difference_cosines() {
    assert_all(mask::check_mask_instances(8));
    assert_all(mask::check_complementarity(100));
}

#[test]
fn protocol_matches_brute_force() {
    assert_all(protocol::check_herding(30));
    assert_all(protocol::check_nme(10));
}

#[test]
fn metrics_match_direct_formulas() {
    assert_all(metrics::check_cka(30));
    assert_all(metrics::check_forgetting(30));
}

#[test]
fn herding_example_from_one_dimensional_features() {
    let rows = vec![vec![-1.0], vec![1.0], vec![1.0]];
    assert_eq!(protocol::brute_force_herding(&rows, 1), vec![1]);
}

#[test]
fn relative_error_definition() {
    assert_eq!(gradients::max_rel_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
    assert!((gradients::max_rel_error(&[2.0], &[1.0]) - 0.5).abs() < 1e-15);
    assert!(gradients::max_rel_error(&[1e-9], &[0.0]) < 1e-5);
}
