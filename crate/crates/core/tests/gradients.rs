mod common;

use common::grad_suite::{composite_case, loss_cases, op_cases, Case};

fn assert_within(cases: &[Case]) {
    let bad: Vec<String> = cases
        .iter()
        .filter(|c| !(c.error < c.tol))
        .map(|c| format!("{}: {:.3e} (tol {:.0e})", c.name, c.error, c.tol))
        .collect();
    assert!(bad.is_empty(), "gradient mismatches: {bad:#?}");
}

#[test]
fn every_op_matches_central_differences() {
    assert_within(&op_cases());
}

#[test]
fn every_loss_matches_central_differences() {
    assert_within(&loss_cases());
}

#[test]
fn composite_loss_matches_central_differences() {
    let c = composite_case();
    println!("{}: {:.3e}", c.name, c.error);
    assert_within(&[c]);
}
