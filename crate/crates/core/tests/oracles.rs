//! Hand-derived values checked against the library. Every expected number
//! is computed here from its closed form, never from library code.

use std::collections::BTreeMap;
use std::f64::consts::{E, LN_2};

use fedcsr::cim::{infonce_loss, ContrastiveBatch};
use fedcsr::datasets::{
    build_item_graph, preprocess, split_chronological, DomainDataset, ItemGraph, PreprocessConfig, UserId, UserSequence,
};
use fedcsr::encoder::{init_params, propagate_graph, LatentDist, SequenceBatch};
use fedcsr::evaluation::compute_metrics;
use fedcsr::federation::{aggregate_params, aggregate_representations, UpMessage};
use fedcsr::params::ParamSet;
use fedcsr::srd::{
    jsd_similarity, kl_to_standard_normal, reconstruction_nll, softplus, Discriminator, PredictorParams,
};
use fedcsr::Tensor;

const TOL: f64 = 1e-6;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL
}

#[test]
fn kl_closed_forms() {
    let one = |mu: f64, sigma: f64| LatentDist {
        mu: Tensor::scalar(mu),
        sigma: Tensor::scalar(sigma),
        seq_len: 1,
    };
    assert!(close(kl_to_standard_normal(&one(0.0, 1.0), &[true]).unwrap(), 0.0));
    assert!(close(kl_to_standard_normal(&one(1.0, 1.0), &[true]).unwrap(), 0.5));
    let expected = 0.5 * (E * E - 3.0);
    assert!((expected - 2.19453).abs() < 1e-5);
    assert!(close(kl_to_standard_normal(&one(0.0, E), &[true]).unwrap(), expected));
}

#[test]
fn kl_ignores_masked_positions() {
    let dist = LatentDist {
        mu: Tensor::from_rows(&[&[1.0], &[5.0]]),
        sigma: Tensor::from_rows(&[&[1.0], &[1.0]]),
        seq_len: 2,
    };
    assert!(close(kl_to_standard_normal(&dist, &[true, false]).unwrap(), 0.5));
}

/// Identity predictor: `f(Z) = Z`.
fn identity_predictor(d: usize) -> PredictorParams {
    let mut p = PredictorParams::init(d, 0);
    for t in p.tensors_mut() {
        *t = Tensor::zeros(t.rows(), t.cols());
    }
    p
}

#[test]
fn reconstruction_of_fixed_logits() {
    // vocab 3 (pad + two items); slot 0 holds item 2 and must predict item 1
    let batch = SequenceBatch::left_padded(&[vec![2, 1]], 2);
    let item_emb = Tensor::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
    let z = Tensor::from_rows(&[&[0.0, 1.0, 0.0], &[0.0, 0.0, 0.0]]);
    let nll = reconstruction_nll(&z, &batch, &identity_predictor(3), &item_emb).unwrap();
    let expected = -(E / (E + 2.0)).ln();
    assert!((expected - 0.5514).abs() < 1e-4, "{expected}");
    assert!(close(nll, expected), "{nll}");
}

#[test]
fn reconstruction_uniform_is_log_vocab() {
    let batch = SequenceBatch::left_padded(&[vec![1, 1, 1]], 3);
    let nll = reconstruction_nll(
        &Tensor::zeros(3, 2),
        &batch,
        &identity_predictor(2),
        &Tensor::zeros(2, 2),
    )
    .unwrap();
    assert!(close(nll, LN_2));
}

#[test]
fn jsd_zero_critic() {
    let zs = Tensor::from_rows(&[&[0.3, -1.0], &[2.0, 0.5]]);
    let zg = Tensor::from_rows(&[&[1.0, 1.0], &[-0.2, 0.7]]);
    let zn = Tensor::from_rows(&[&[0.0, 4.0], &[1.0, 1.0]]);
    let i = jsd_similarity(&zs, &zg, &zn, &Discriminator::zero(2)).unwrap();
    assert!(close(i, -2.0 * LN_2));
    assert!((-2.0 * LN_2 + 1.3863).abs() < 1e-4);
}

#[test]
fn jsd_with_identical_arguments() {
    let mut disc = Discriminator::zero(2);
    disc.w = Tensor::from_rows(&[&[0.7, -0.3], &[0.2, 1.1]]);
    disc.bias = Tensor::scalar(0.25);
    let zs = Tensor::from_rows(&[&[0.3, -1.0], &[2.0, 0.5], &[-1.0, -1.0]]);
    let zg = Tensor::from_rows(&[&[1.0, 1.0], &[-0.2, 0.7], &[0.4, -2.0]]);
    let i = jsd_similarity(&zs, &zg, &zs, &disc).unwrap();
    // independent score and the pointwise identity
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    for r in 0..3 {
        let (a, b) = (zs.row(r), zg.row(r));
        let t = 0.25
            + (0..2)
                .flat_map(|p| (0..2).map(move |q| (p, q)))
                .map(|(p, q)| a[p] * disc.w.get(p, q) * b[q])
                .sum::<f64>();
        let sp = |x: f64| (1.0 + x.exp()).ln();
        lhs += -sp(-t) - sp(t);
        rhs += -t.abs() - 2.0 * sp(-t.abs());
    }
    assert!(close(lhs, rhs));
    assert!(close(i, lhs / 3.0));
    assert!(i <= -2.0 * LN_2 + TOL);
}

#[test]
fn softplus_matches_definition() {
    for x in [-30.0, -2.0, 0.0, 0.5, 3.0, 30.0] {
        assert!(close(softplus(x), (1.0 + f64::exp(x)).ln()));
    }
}

#[test]
fn infonce_orthogonal_negatives() {
    // anchors e1, e2 and identical positives: every view has one partner at
    // similarity 1 and two orthogonal negatives
    let a = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let cb = ContrastiveBatch::new(a.clone(), a).unwrap();
    let expected = -(E / (E + 2.0)).ln();
    assert!(close(infonce_loss(&cb, 1.0).unwrap(), expected));
}

#[test]
fn infonce_single_pair_is_zero() {
    let cb = ContrastiveBatch::new(Tensor::from_rows(&[&[1.0, 2.0]]), Tensor::from_rows(&[&[-3.0, 0.5]])).unwrap();
    assert!(close(infonce_loss(&cb, 0.5).unwrap(), 0.0));
}

#[test]
fn metrics_of_rank_three() {
    let m = compute_metrics(&[3], 10).unwrap();
    assert!(close(m.mrr, 1.0 / 3.0));
    assert!(close(m.hr_at_k, 1.0));
    assert!(close(m.ndcg_at_k, 1.0 / 4f64.log2()));
    assert!(close(m.ndcg_at_k, 0.5));
    let outside = compute_metrics(&[11], 10).unwrap();
    assert_eq!((outside.hr_at_k, outside.ndcg_at_k), (0.0, 0.0));
}

fn up(id: usize, count: usize, value: f64) -> UpMessage {
    UpMessage {
        client_id: id,
        shared_params: ParamSet::from_named([("w".to_owned(), Tensor::full(2, 3, value))]),
        rep_table: [(UserId::from("u"), Tensor::full(4, 2, value))].into(),
        sample_count: count,
    }
}

#[test]
fn aggregation_weighted_mean() {
    let agg = aggregate_params(&[up(0, 1, 0.0), up(1, 3, 4.0)]).unwrap();
    let w = agg.get("w").unwrap();
    assert!(w.data().iter().all(|&v| close(v, 3.0)));
    let reps = aggregate_representations(&[up(0, 1, 0.0), up(1, 3, 4.0)]).unwrap();
    assert!(reps[&UserId::from("u")].data().iter().all(|&v| close(v, 3.0)));
}

#[test]
fn aggregation_identity_and_symmetry() {
    let single = up(0, 7, 1.25);
    let agg = aggregate_params(std::slice::from_ref(&single)).unwrap();
    assert_eq!(agg, single.shared_params);
    let sym = aggregate_params(&[up(0, 5, 2.5), up(1, 5, -2.5)]).unwrap();
    assert!(sym.get("w").unwrap().data().iter().all(|&v| v.abs() <= TOL));
}

#[test]
fn representations_renormalise_over_reporting_clients() {
    let mut a = up(0, 1, 2.0);
    a.rep_table.insert(UserId::from("only_a"), Tensor::full(4, 2, 9.0));
    let reps = aggregate_representations(&[a, up(1, 3, 6.0)]).unwrap();
    assert!(reps[&UserId::from("only_a")].data().iter().all(|&v| close(v, 9.0)));
    assert!(reps[&UserId::from("u")].data().iter().all(|&v| close(v, 5.0)));
}

#[test]
fn propagation_two_item_example() {
    // pad row plus items 1 and 2 that co-occur: rows 1 and 2 are uniform
    let graph = ItemGraph::from_sequences(3, [[1usize, 2].as_slice()]);
    assert!(close(graph.adjacency().get(1, 1), 0.5) && close(graph.adjacency().get(1, 2), 0.5));
    let mut params = init_params(2, 4, 3, 1, 0).unwrap();
    params.gnn_base_emb = Tensor::from_rows(&[&[0.0, 0.0], &[1.0, 2.0], &[3.0, 6.0]]);
    let out = propagate_graph(&graph, &params).unwrap();
    // mean(H⁰, A·H⁰) by hand
    let expected = [[1.5, 3.0], [2.5, 5.0]];
    for (r, row) in expected.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            assert!(close(out.get(r + 1, c), v), "row {} col {c}", r + 1);
        }
    }
}

#[test]
fn graph_of_one_sequence() {
    let mut ds = DomainDataset::raw("d", 5, vec![UserSequence::new("u", vec![1, 2, 3])]);
    ds.valid = BTreeMap::new();
    let g = build_item_graph(&ds);
    let a = g.adjacency();
    assert!(close(a.get(1, 1), 0.5) && close(a.get(1, 2), 0.5) && close(a.get(1, 3), 0.0));
    assert!(close(a.get(2, 1), 1.0 / 3.0) && close(a.get(2, 3), 1.0 / 3.0));
    // item 4 never occurs: pure self-loop
    assert!(close(a.get(4, 4), 1.0));
}

#[test]
fn ten_item_history_splits_eight_one_one() {
    let sz = split_chronological(10);
    assert_eq!((sz.train, sz.valid, sz.test), (8, 1, 1));
    let users: Vec<UserSequence> = (0..10)
        .map(|u| UserSequence::new(format!("u{u}"), (1..=10).collect()))
        .collect();
    let ds = preprocess(&DomainDataset::raw("d", 11, users), &PreprocessConfig::default()).unwrap();
    let u = UserId::from("u0");
    assert_eq!(ds.train[&u].len(), 8);
    assert_eq!(ds.valid[&u].items, vec![9]);
    assert_eq!(ds.test[&u].items, vec![10]);
}
