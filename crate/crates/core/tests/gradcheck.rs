mod common;

use common::{
    gradcheck_strategies, worst_adv_error, worst_l_y_error, worst_primitive_error, Fixture, GRAD_H, GRAD_SEEDS,
    GRAD_TOL,
};
use sdan::autodiff::check::{analytic_grads, max_rel_error, numerical_grads};
use sdan::conditioning::ConditioningStrategy;

#[test]
fn every_primitive_matches_finite_differences() {
    let (err, case) = worst_primitive_error(GRAD_SEEDS);
    assert!(err <= GRAD_TOL, "{case}: rel err {err:e}");
}

#[test]
fn classification_loss_matches_finite_differences() {
    let err = worst_l_y_error(GRAD_SEEDS);
    assert!(err <= GRAD_TOL, "rel err {err:e}");
}

#[test]
fn adversarial_losses_match_finite_differences() {
    for strategy in gradcheck_strategies() {
        let err = worst_adv_error(&strategy, GRAD_SEEDS);
        assert!(err <= GRAD_TOL, "{}: rel err {err:e}", strategy.label());
    }
}

#[test]
fn frozen_branch_oracle_notices_a_missing_detach() {
    // With the branch live, finite differences see the prediction path and
    // disagree with the detached analytic gradient.
    let fx = Fixture::smooth(ConditioningStrategy::sdan(3.0), 0);
    let live = |g: &mut _, x: &[_]| fx.l_adv(g, x);
    let oracle = |g: &mut _, x: &[_]| fx.l_adv_frozen_branch(g, x);
    let params = fx.params();
    let analytic = analytic_grads(&live, &params).unwrap();
    assert!(max_rel_error(&analytic, &numerical_grads(&oracle, &params, GRAD_H).unwrap()) <= GRAD_TOL);
    assert!(max_rel_error(&analytic, &numerical_grads(&live, &params, GRAD_H).unwrap()) > 1e-2);
}
