//! Closed-form checks run before every experiment and by `oracle-check`.
//! Each expected value is computed here from its formula, independently of
//! the library code it is compared against.

use std::f64::consts::{E, LN_2};

use fedcsr::cim::{infonce_loss, ContrastiveBatch};
use fedcsr::datasets::{split_chronological, ItemGraph, UserId};
use fedcsr::encoder::{init_params, propagate_graph, LatentDist, SequenceBatch};
use fedcsr::evaluation::compute_metrics;
use fedcsr::federation::{aggregate_params, aggregate_representations, UpMessage};
use fedcsr::gradcheck::check_all;
use fedcsr::params::ParamSet;
use fedcsr::srd::{jsd_similarity, kl_to_standard_normal, reconstruction_nll, Discriminator, PredictorParams};
use fedcsr::Tensor;
use serde::Serialize;

const TOL: f64 = 1e-6;
const GRAD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleResult {
    pub name: String,
    pub expected: f64,
    pub actual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleResult {
    fn new(name: &str, expected: f64, actual: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_owned(),
            expected,
            actual,
            tolerance,
            pass: (expected - actual).abs() <= tolerance,
        }
    }

    fn from_result(name: &str, expected: f64, actual: fedcsr::Result<f64>, tolerance: f64) -> Self {
        Self::new(name, expected, actual.unwrap_or(f64::NAN), tolerance)
    }
}

fn scalar_dist(mu: f64, sigma: f64) -> LatentDist {
    LatentDist {
        mu: Tensor::scalar(mu),
        sigma: Tensor::scalar(sigma),
        seq_len: 1,
    }
}

fn identity_predictor(d: usize) -> PredictorParams {
    let mut p = PredictorParams::init(d, 0);
    for t in p.tensors_mut() {
        *t = Tensor::zeros(t.rows(), t.cols());
    }
    p
}

fn upload(id: usize, count: usize, value: f64) -> UpMessage {
    UpMessage {
        client_id: id,
        shared_params: ParamSet::from_named([("w".to_owned(), Tensor::full(1, 1, value))]),
        rep_table: [(UserId::from("u"), Tensor::full(1, 1, value))].into(),
        sample_count: count,
    }
}

/// The closed-form suite.
pub fn run_oracles() -> Vec<OracleResult> {
    let mut out = vec![
        OracleResult::from_result(
            "kl N(0,1)",
            0.0,
            kl_to_standard_normal(&scalar_dist(0.0, 1.0), &[true]),
            TOL,
        ),
        OracleResult::from_result(
            "kl N(1,1)",
            0.5,
            kl_to_standard_normal(&scalar_dist(1.0, 1.0), &[true]),
            TOL,
        ),
        OracleResult::from_result(
            "kl N(0,e^2)",
            0.5 * (E * E - 3.0),
            kl_to_standard_normal(&scalar_dist(0.0, E), &[true]),
            TOL,
        ),
    ];

    // vocabulary {pad, 1, 2} with one-hot embeddings and f(Z) = Z
    let batch = SequenceBatch::left_padded(&[vec![2, 1]], 2);
    let emb = Tensor::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
    let z = Tensor::from_rows(&[&[0.0, 1.0, 0.0], &[0.0, 0.0, 0.0]]);
    out.push(OracleResult::from_result(
        "reconstruction nll",
        -(E / (E + 2.0)).ln(),
        reconstruction_nll(&z, &batch, &identity_predictor(3), &emb),
        TOL,
    ));

    let zs = Tensor::from_rows(&[&[0.3, -1.0], &[2.0, 0.5]]);
    let zg = Tensor::from_rows(&[&[1.0, 1.0], &[-0.2, 0.7]]);
    let zn = Tensor::from_rows(&[&[0.0, 4.0], &[1.0, 1.0]]);
    out.push(OracleResult::from_result(
        "jsd zero critic",
        -2.0 * LN_2,
        jsd_similarity(&zs, &zg, &zn, &Discriminator::zero(2)),
        TOL,
    ));

    // identical first arguments: mean of -sp(-t) - sp(t) with t = a'Wb + c
    let mut disc = Discriminator::zero(2);
    disc.w = Tensor::from_rows(&[&[0.7, -0.3], &[0.2, 1.1]]);
    disc.bias = Tensor::scalar(0.25);
    let sp = |x: f64| (1.0 + x.exp()).ln();
    let expected = (0..2)
        .map(|r| {
            let (a, b) = (zs.row(r), zg.row(r));
            let t = 0.25 + a[0] * (0.7 * b[0] - 0.3 * b[1]) + a[1] * (0.2 * b[0] + 1.1 * b[1]);
            -sp(-t) - sp(t)
        })
        .sum::<f64>()
        / 2.0;
    out.push(OracleResult::from_result(
        "jsd self negatives",
        expected,
        jsd_similarity(&zs, &zg, &zs, &disc),
        TOL,
    ));

    let views = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
    out.push(OracleResult::from_result(
        "infonce orthogonal",
        -(E / (E + 2.0)).ln(),
        ContrastiveBatch::new(views.clone(), views).and_then(|cb| infonce_loss(&cb, 1.0)),
        TOL,
    ));

    let m = compute_metrics(&[3], 10).ok();
    out.push(OracleResult::new(
        "mrr rank 3",
        1.0 / 3.0,
        m.map_or(f64::NAN, |m| m.mrr),
        TOL,
    ));
    out.push(OracleResult::new(
        "ndcg@10 rank 3",
        1.0 / 4f64.log2(),
        m.map_or(f64::NAN, |m| m.ndcg_at_k),
        TOL,
    ));

    out.push(OracleResult::from_result(
        "fedavg 1:3",
        0.25 * 0.0 + 0.75 * 4.0,
        aggregate_params(&[upload(0, 1, 0.0), upload(1, 3, 4.0)]).map(|p| p.get("w").map_or(f64::NAN, |t| t.get(0, 0))),
        TOL,
    ));
    out.push(OracleResult::from_result(
        "representation mean 1:3",
        3.0,
        aggregate_representations(&[upload(0, 1, 0.0), upload(1, 3, 4.0)])
            .map(|r| r.get(&UserId::from("u")).map_or(f64::NAN, |t| t.get(0, 0))),
        TOL,
    ));

    // sequence (1, 2, 3): row 1 keeps its self-loop and the edge to 2
    let graph = ItemGraph::from_sequences(4, [[1usize, 2, 3].as_slice()]);
    out.push(OracleResult::new(
        "graph row weight",
        0.5,
        graph.adjacency().get(1, 2),
        TOL,
    ));

    // two co-occurring items, one layer: mean of H and the row average of H
    let graph = ItemGraph::from_sequences(3, [[1usize, 2].as_slice()]);
    let propagated = init_params(2, 4, 3, 1, 0).and_then(|mut p| {
        p.gnn_base_emb = Tensor::from_rows(&[&[0.0, 0.0], &[1.0, 2.0], &[3.0, 6.0]]);
        propagate_graph(&graph, &p)
    });
    out.push(OracleResult::from_result(
        "propagation one layer",
        0.5 * (1.0 + 0.5 * (1.0 + 3.0)),
        propagated.map(|h| h.get(1, 0)),
        TOL,
    ));

    let sizes = split_chronological(10);
    out.push(OracleResult::new("split of 10 (train)", 8.0, sizes.train as f64, 0.0));
    out.push(OracleResult::new("split of 10 (test)", 1.0, sizes.test as f64, 0.0));
    out
}

/// Finite-difference checks of every loss term's analytic gradient.
pub fn run_gradient_checks() -> Vec<OracleResult> {
    check_all(0, GRAD_STEP)
        .into_iter()
        .map(|c| {
            OracleResult::new(
                &format!("gradient {:?} ({})", c.term, c.worst_group),
                0.0,
                c.worst_error,
                GRAD_TOL,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_suite_passes() {
        let results = run_oracles();
        assert!(results.len() >= 9);
        for r in results {
            assert!(r.pass, "{r:?}");
        }
    }
}
