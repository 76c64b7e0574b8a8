//! Every analytic gradient in the crate against central finite
//! differences, from single ops to the full two-stage cascade.

use chs_core::checks::gradient_suite;

#[test]
fn every_gradient_matches_finite_differences() {
    let results = gradient_suite().expect("suite construction");
    let mut failures = Vec::new();
    for r in &results {
        println!(
            "{:24} max_rel_err {:10.3e}  tolerance {:8.0e}  {}",
            r.name,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        );
        if !r.passed() {
            failures.push(r.name);
        }
    }
    assert!(failures.is_empty(), "gradient checks failed: {failures:?}");
    assert!(results.len() >= 30, "suite unexpectedly small");
}
