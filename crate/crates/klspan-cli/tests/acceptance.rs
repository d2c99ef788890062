//! Acceptance suite: one test per acceptance criterion, each running
//! the corresponding verify check at its pinned sizes and tolerances
//! and printing the pass/fail line.

use klspan_cli::verify::{self, CheckResult};

fn assert_pass(result: CheckResult) {
    println!(
        "{} {}  measured: {}  tolerance: {}  ({:.1}s)",
        if result.passed { "PASS" } else { "FAIL" },
        result.name,
        result.measured,
        result.tolerance,
        result.seconds
    );
    assert!(
        result.passed,
        "{} failed: measured {} against {}",
        result.name, result.measured, result.tolerance
    );
}

#[test]
fn criterion_01_rejection_exactness() {
    assert_pass(verify::check_rejection_tv());
}

#[test]
fn criterion_02_density_estimate() {
    assert_pass(verify::check_rejection_density());
}

#[test]
fn criterion_03a_reward_difference_identity() {
    assert_pass(verify::check_identity_reward_difference());
}

#[test]
fn criterion_03b_kl_regret_identity() {
    assert_pass(verify::check_identity_kl_regret());
}

#[test]
fn criterion_03c_performance_difference_identity() {
    assert_pass(verify::check_identity_performance_difference());
}

#[test]
fn criterion_03d_soft_bellman_consistency() {
    assert_pass(verify::check_identity_soft_bellman());
}

#[test]
fn criterion_04_spanner_size_bound() {
    assert_pass(verify::check_spanner_size_bound());
}

#[test]
fn criterion_05_elliptic_potential() {
    assert_pass(verify::check_elliptic_potential());
}

#[test]
fn criterion_06_spanner_end_to_end() {
    assert_pass(verify::check_spanner_end_to_end());
}

#[test]
fn criterion_07_fast_rate_trend() {
    assert_pass(verify::check_spanner_fast_rate());
}

#[test]
fn criterion_08_coverage_separation() {
    assert_pass(verify::check_coverage_separation());
}

#[test]
fn criterion_09_truncated_density_bound() {
    assert_pass(verify::check_truncated_density());
}

#[test]
fn criterion_10_mtss_end_to_end() {
    assert_pass(verify::check_mtss_end_to_end());
}

#[test]
fn criterion_11_autoregressive_gap() {
    assert_pass(verify::check_autoregressive_gap());
}

#[test]
fn criterion_12_dnf_toolkit() {
    assert_pass(verify::check_dnf_toolkit());
}
