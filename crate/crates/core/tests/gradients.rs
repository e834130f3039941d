//! Finite-difference verification of every differentiable op (small
//! instance counts here; the acceptance suite runs the full 20-instance
//! sweep).

use edas_core::gradcheck::suite;

#[test]
fn gradient_suite_small() {
    let reports = suite::run_all(3, 1);
    let mut failed = false;
    for r in &reports {
        println!("{r}");
        if !r.pass() {
            failed = true;
        }
    }
    assert!(!failed, "gradient checks failed");
}
