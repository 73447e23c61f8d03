//! Analytic gradients of every loss term against central finite differences
//! on every parameter tensor (d = 4, T = 5, vocabulary 12, batch 3), and
//! where each term is allowed to send gradient.

use fedcsr::autograd::Graph;
use fedcsr::gradcheck::{check_all, GradientFixture, LossTerm, LOSS_TERMS};

const H: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;

#[test]
fn every_term_matches_finite_differences() {
    for seed in [0, 1] {
        let checks = check_all(seed, H);
        assert_eq!(checks.len(), LOSS_TERMS.len());
        for c in checks {
            assert!(
                c.worst_error < TOLERANCE,
                "{:?} (seed {seed}): relative error {:.2e} on `{}`",
                c.term,
                c.worst_error,
                c.worst_group
            );
        }
    }
}

#[test]
fn similarity_gradient_does_not_reach_the_exclusive_branch() {
    let toy = GradientFixture::new(0);
    let mut g = Graph::new();
    let (loss, leaves) = toy.build(&mut g, LossTerm::Jsd);
    let grads = g.backward(loss);
    for (name, leaf) in toy.names().iter().zip(&leaves) {
        let norm = grads.get_or_zero(*leaf).norm();
        if name.starts_with("exclusive.") || name.starts_with("predictor.") {
            assert_eq!(norm, 0.0, "{name}");
        }
    }
    assert!(
        grads.get_or_zero(leaves[leaves.len() - 2]).norm() > 0.0,
        "critic weight"
    );
}

#[test]
fn contrastive_gradient_stays_in_the_exclusive_branch() {
    let toy = GradientFixture::new(0);
    let mut g = Graph::new();
    let (loss, leaves) = toy.build(&mut g, LossTerm::InfoNce);
    let grads = g.backward(loss);
    let mut exclusive = 0.0;
    for (name, leaf) in toy.names().iter().zip(&leaves) {
        let norm = grads.get_or_zero(*leaf).norm();
        if name.starts_with("exclusive.") {
            exclusive += norm;
        } else {
            assert_eq!(norm, 0.0, "{name}");
        }
    }
    assert!(exclusive > 0.0);
}
