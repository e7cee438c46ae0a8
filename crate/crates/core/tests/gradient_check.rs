//! Analytic gradients against a central finite-difference oracle.

mod common;

use common::max_gradient_error;

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..5 {
        let err = max_gradient_error(1000 + seed, 40);
        assert!(err < 1e-6, "seed {seed}: max relative error {err:e}");
    }
}
