//! Finite-difference checks of every training loss term on a tiny model.

mod support;

use incdet_core::distill::LossTerm;
use support::grad::{max_distill_at_expansion, max_relative_error, setup};

#[test]
fn tiny_model_is_small() {
    assert!(setup(0).student.parameter_count() <= 5000);
}

#[test]
fn every_term_matches_finite_differences() {
    let s = setup(11);
    for term in LossTerm::ALL {
        let err = max_relative_error(&s, term);
        assert!(err < 1e-4, "{term:?}: max relative error {err:e}");
    }
}

#[test]
fn distillation_vanishes_at_expansion() {
    assert!(max_distill_at_expansion(10, 5) < 1e-10);
}
