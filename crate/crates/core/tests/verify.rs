use resvm::verify::{
    carry_dropping_kernel, checkpoint_round_trip, chunked_kernel, cross_scan_round_trip,
    discretization_errors, discretization_order, grad_op_names, grad_ops, grad_vss_block,
    residual_equivalence, scan_oracle, SuiteReport,
};

fn assert_pass(r: &SuiteReport) {
    eprintln!("{}", r.line());
    assert!(r.passed, "{}", r.line());
}

#[test]
fn scan_oracle_passes() {
    let r = scan_oracle(100, &chunked_kernel);
    assert_pass(&r);
    assert!(r.seconds < 10.0);
}

#[test]
fn carry_mutant_is_caught() {
    let r = scan_oracle(5, &carry_dropping_kernel);
    eprintln!("{}", r.line());
    assert!(!r.passed);
    assert!(r.max_error > 1e-2);
}

#[test]
fn every_op_passes_grad_check() {
    let reports = grad_ops(100);
    assert_eq!(reports.len(), grad_op_names().len());
    for r in &reports {
        assert_pass(r);
    }
}

#[test]
fn vss_block_passes_grad_check() {
    assert_pass(&grad_vss_block(0));
}

#[test]
fn first_order_discretization_error_quarters() {
    let errs = discretization_errors().unwrap();
    // Δ - (1 - e^{-Δ}) at Δ = 0.2, by hand.
    assert!((errs[0].1 - 0.018730753).abs() < 1e-8, "{errs:?}");
    assert_pass(&discretization_order());
}

#[test]
fn cross_scan_round_trips() {
    assert_pass(&cross_scan_round_trip(16, 0));
}

#[test]
fn residual_variant_is_equivalent_at_init() {
    assert_pass(&residual_equivalence(0));
}

#[test]
fn checkpoint_round_trips() {
    assert_pass(&checkpoint_round_trip(0));
}
