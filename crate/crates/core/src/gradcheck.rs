//! Finite-difference verification of every loss term.
//!
//! A small fixture holds both encoder branches, the predictor and the
//! critic on a padded three-sequence batch with fixed reparameterisation
//! noise. Each loss term is rebuilt on the tape and its analytic gradient
//! compared against central differences on every parameter tensor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{finite_difference, relative_error, Graph, Var};
use crate::cim::{augment_shuffle, infonce_var};
use crate::datasets::ItemGraph;
use crate::encoder::{init_params, sample_var, EncoderParams, SequenceBatch};
use crate::srd::{jsd_var, kl_var, reconstruction_var, Discriminator, PredictorParams};
use crate::tensor::Tensor;

pub const D: usize = 4;
pub const T: usize = 5;
pub const VOCAB: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    KlShared,
    KlExclusive,
    JointNll,
    ExclusiveNll,
    Jsd,
    InfoNce,
}

pub const LOSS_TERMS: [LossTerm; 6] = [
    LossTerm::KlShared,
    LossTerm::KlExclusive,
    LossTerm::JointNll,
    LossTerm::ExclusiveNll,
    LossTerm::Jsd,
    LossTerm::InfoNce,
];

/// Two branches, predictor and critic on a three-sequence batch with
/// padding (d = 4, T = 5, vocabulary 12).
#[derive(Clone)]
pub struct GradientFixture {
    pub shared: EncoderParams,
    pub exclusive: EncoderParams,
    pub predictor: PredictorParams,
    pub disc: Discriminator,
    pub graph: ItemGraph,
    pub batch: SequenceBatch,
    pub augmented: SequenceBatch,
    pub noise: [Tensor; 3],
    pub z_global: Tensor,
    /// Exclusive user vectors of the unperturbed model (the detached negatives).
    pub z_neg: Tensor,
}

fn normal(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::from_fn(r, c, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal))
}

impl GradientFixture {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seqs = vec![vec![1, 2, 3, 4, 5], vec![6, 7, 2], vec![8, 9, 10, 11]];
        let batch = SequenceBatch::left_padded(&seqs, T);
        let augmented = augment_shuffle(&batch, &mut rng);
        let graph = ItemGraph::from_sequences(VOCAB, seqs.iter().map(|s| s.as_slice()));
        let mut disc = Discriminator::init(D, seed + 3);
        disc.w = normal(&mut rng, D, D).scale(0.5);
        disc.bias = Tensor::scalar(0.1);
        let noise = [
            normal(&mut rng, 3 * T, D),
            normal(&mut rng, 3 * T, D),
            normal(&mut rng, 3 * T, D),
        ];
        let z_global = normal(&mut rng, 3, D);
        let mut toy = Self {
            shared: init_params(D, T, VOCAB, 2, seed + 1).expect("fixture shapes are valid"),
            exclusive: init_params(D, T, VOCAB, 2, seed + 2).expect("fixture shapes are valid"),
            predictor: PredictorParams::init(D, seed + 4),
            disc,
            graph,
            batch,
            augmented,
            noise,
            z_global,
            z_neg: Tensor::zeros(3, D),
        };
        // non-trivial layer-norm and bias values so every group is exercised
        for (i, t) in toy
            .shared
            .tensors_mut()
            .into_iter()
            .chain(toy.exclusive.tensors_mut())
            .enumerate()
        {
            if t.rows() == 1 {
                let perturb = normal(&mut ChaCha8Rng::seed_from_u64(seed * 1000 + i as u64), 1, t.cols()).scale(0.1);
                t.add_assign(&perturb);
            }
        }
        toy.z_neg = toy.exclusive_user_vectors();
        toy
    }

    fn exclusive_user_vectors(&self) -> Tensor {
        let mut g = Graph::new();
        let ev = self.exclusive.bind(&mut g, false);
        let rel = ev.relational(&mut g, &self.graph);
        let de = ev.forward(&mut g, rel, &self.batch, None);
        let ze = sample_var(&mut g, de, self.noise[1].clone());
        g.value(ze).gather_rows(&self.batch.last_slots())
    }

    /// Names of all parameter tensors in [`Self::tensors_mut`] order.
    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .shared
            .named_tensors()
            .into_iter()
            .map(|(n, _)| format!("shared.{n}"))
            .collect();
        names.extend(
            self.exclusive
                .named_tensors()
                .into_iter()
                .map(|(n, _)| format!("exclusive.{n}")),
        );
        names.extend(["w1", "b1", "w2", "b2"].map(|n| format!("predictor.{n}")));
        names.extend(["w", "bias"].map(|n| format!("disc.{n}")));
        names
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.shared.tensors_mut();
        out.extend(self.exclusive.tensors_mut());
        out.extend(self.predictor.tensors_mut());
        out.extend(self.disc.tensors_mut());
        out
    }

    /// Builds one loss term; returns it with the parameter leaves in
    /// [`Self::names`] order.
    pub fn build(&self, g: &mut Graph, term: LossTerm) -> (Var, Vec<Var>) {
        let sv = self.shared.bind(g, true);
        let ev = self.exclusive.bind(g, true);
        let pv = self.predictor.bind(g, true);
        let dv = self.disc.bind(g);
        let mut leaves = sv.leaves().to_vec();
        leaves.extend_from_slice(ev.leaves());
        leaves.extend([pv.w1, pv.b1, pv.w2, pv.b2, dv.w, dv.bias]);

        let rel_s = sv.relational(g, &self.graph);
        let rel_e = ev.relational(g, &self.graph);
        let ds = sv.forward(g, rel_s, &self.batch, None);
        let de = ev.forward(g, rel_e, &self.batch, None);
        let zs = sample_var(g, ds, self.noise[0].clone());
        let ze = sample_var(g, de, self.noise[1].clone());
        let real = self.batch.real_slots();
        let last = self.batch.last_slots();
        let loss = match term {
            LossTerm::KlShared => kl_var(g, ds.mu, ds.sigma, &real),
            LossTerm::KlExclusive => kl_var(g, de.mu, de.sigma, &real),
            LossTerm::JointNll => {
                let z = g.add(zs, ze);
                reconstruction_var(g, z, &self.batch, &pv, ev.item_emb).expect("fixture shapes are valid")
            }
            LossTerm::ExclusiveNll => {
                reconstruction_var(g, ze, &self.batch, &pv, ev.item_emb).expect("fixture shapes are valid")
            }
            LossTerm::Jsd => {
                let a = g.gather(zs, last);
                let n = g.constant(self.z_neg.clone());
                let zg = g.constant(self.z_global.clone());
                jsd_var(g, a, n, zg, dv).expect("fixture shapes are valid")
            }
            LossTerm::InfoNce => {
                let da = ev.forward(g, rel_e, &self.augmented, None);
                let za = sample_var(g, da, self.noise[2].clone());
                let a = g.gather(ze, last.clone());
                let p = g.gather(za, last);
                infonce_var(g, a, p, 0.5).expect("fixture shapes are valid")
            }
        };
        (loss, leaves)
    }

    pub fn value(&self, term: LossTerm) -> f64 {
        let mut g = Graph::new();
        let (loss, _) = self.build(&mut g, term);
        g.value(loss).item()
    }
}

/// Worst relative gradient error of one term.
#[derive(Clone, Debug, PartialEq)]
pub struct TermCheck {
    pub term: LossTerm,
    pub worst_error: f64,
    /// Parameter group with the worst error.
    pub worst_group: String,
}

/// Compares the tape gradient of `term` with central differences of step
/// `h` on every parameter group.
pub fn check_term(fixture: &GradientFixture, term: LossTerm, h: f64) -> TermCheck {
    let mut g = Graph::new();
    let (loss, leaves) = fixture.build(&mut g, term);
    let grads = g.backward(loss);
    let mut out = TermCheck {
        term,
        worst_error: 0.0,
        worst_group: String::new(),
    };
    for (i, (name, leaf)) in fixture.names().iter().zip(&leaves).enumerate() {
        let analytic = grads.get_or_zero(*leaf);
        let mut probe = fixture.clone();
        let base = probe.tensors_mut()[i].clone();
        let numeric = finite_difference(&base, h, |x| {
            *probe.tensors_mut()[i] = x.clone();
            probe.value(term)
        });
        let err = relative_error(&analytic, &numeric);
        if err > out.worst_error {
            out.worst_error = err;
            out.worst_group = name.clone();
        }
    }
    out
}

/// [`check_term`] for every term on the fixture built from `seed`.
pub fn check_all(seed: u64, h: f64) -> Vec<TermCheck> {
    let fixture = GradientFixture::new(seed);
    LOSS_TERMS.iter().map(|&t| check_term(&fixture, t, h)).collect()
}
