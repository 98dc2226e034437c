mod common;

use common::{check_term_gradients, grad_setup, GRAD_RTOL, TERMS};

#[test]
fn every_term_matches_finite_differences() {
    let s = grad_setup();
    for (i, term) in TERMS.iter().enumerate() {
        let checks = check_term_gradients(&s, term, 100 + i as u64).unwrap();
        assert!(!checks.is_empty());
        for c in checks {
            assert!(
                c.rel_error() <= GRAD_RTOL,
                "{term}[{}] wrt {}: {} vs {}",
                c.objective,
                c.group.name(),
                c.analytic,
                c.numeric
            );
        }
    }
}
