use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::optim::Adam;
use super::protocol::{DownMessage, UpMessage};
use crate::autograd::{Graph, Var};
use crate::cim::{augment_shuffle, infonce_var};
use crate::datasets::{build_item_graph, DomainDataset, ItemGraph, UserId};
use crate::encoder::{encode, sample_var, standard_normal, Dropout, EncoderParams, EncoderVars, SequenceBatch};
use crate::error::{Error, Result};
use crate::evaluation::{
    case_negatives, compute_metrics, eval_cases, predict_scores, rank_cases, FusionMode, Metrics, Split,
};
use crate::params::ParamSet;
use crate::seed;
use crate::srd::{jsd_var, kl_var, reconstruction_var, Discriminator, LossBreakdown, PredictorParams, TermVars};
use crate::tensor::Tensor;

pub(crate) const TAG_GLOBAL_INIT: u64 = 1;
const TAG_EXCLUSIVE_INIT: u64 = 2;
const TAG_PREDICTOR_INIT: u64 = 3;
const TAG_DISC_INIT: u64 = 4;
const TAG_TRAIN: u64 = 5;

/// Sequences encoded per forward pass outside training.
const INFERENCE_BATCH: usize = 128;

/// One domain's participant: data, both branches, predictor, critic and
/// optimiser state.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub domain: DomainDataset,
    /// Item graph over the domain's own vocabulary.
    pub local_graph: ItemGraph,
    /// The same graph padded to the shared branch's vocabulary.
    pub shared_graph: ItemGraph,
    pub shared: EncoderParams,
    /// Absent for the monolithic variant.
    pub exclusive: Option<EncoderParams>,
    pub predictor: PredictorParams,
    pub disc: Discriminator,
    pub optimizer: Adam,
    /// Last global representation table received.
    pub global_reps: BTreeMap<UserId, Tensor>,
    monolithic: bool,
}

/// Initial shared-branch parameters, identical on the server and every client.
pub fn initial_shared(cfg: &TrainConfig, shared_vocab: usize) -> Result<EncoderParams> {
    EncoderParams::init(
        cfg.model.encoder_shape(shared_vocab),
        seed::derive(cfg.seed, &[TAG_GLOBAL_INIT]),
    )
}

/// Initial predictor of the monolithic variant (aggregated, hence shared).
pub fn initial_predictor(cfg: &TrainConfig) -> PredictorParams {
    PredictorParams::init(
        cfg.model.dim,
        seed::derive(cfg.seed, &[TAG_GLOBAL_INIT, TAG_PREDICTOR_INIT]),
    )
}

/// One client per domain; the shared branch covers the largest vocabulary.
pub fn build_clients(domains: Vec<DomainDataset>, cfg: &TrainConfig) -> Result<Vec<ClientState>> {
    cfg.validate()?;
    if domains.is_empty() {
        return Err(Error::Config("at least one domain is required".into()));
    }
    let shared_vocab = domains.iter().map(|d| d.vocab_size).max().unwrap_or(0);
    domains
        .into_iter()
        .enumerate()
        .map(|(k, d)| ClientState::new(k, d, shared_vocab, cfg))
        .collect()
}

impl ClientState {
    pub fn new(id: usize, domain: DomainDataset, shared_vocab: usize, cfg: &TrainConfig) -> Result<Self> {
        domain.validate()?;
        let local_graph = build_item_graph(&domain);
        let shared_graph = local_graph.padded_to(shared_vocab)?;
        let monolithic = cfg.variant.is_monolithic();
        let k = id as u64;
        let exclusive = if monolithic {
            None
        } else {
            Some(EncoderParams::init(
                cfg.model.encoder_shape(domain.vocab_size),
                seed::derive(cfg.seed, &[TAG_EXCLUSIVE_INIT, k]),
            )?)
        };
        let predictor = if monolithic {
            initial_predictor(cfg)
        } else {
            PredictorParams::init(cfg.model.dim, seed::derive(cfg.seed, &[TAG_PREDICTOR_INIT, k]))
        };
        Ok(Self {
            id,
            local_graph,
            shared_graph,
            shared: initial_shared(cfg, shared_vocab)?,
            exclusive,
            predictor,
            disc: Discriminator::init(cfg.model.dim, seed::derive(cfg.seed, &[TAG_DISC_INIT, k])),
            optimizer: Adam::new(cfg.lr),
            global_reps: BTreeMap::new(),
            monolithic,
            domain,
        })
    }

    pub fn is_monolithic(&self) -> bool {
        self.monolithic
    }

    /// `|D_k|`: number of training sequences.
    pub fn sample_count(&self) -> usize {
        self.domain.train.len()
    }

    /// Fusion modes this client can be evaluated in.
    pub fn fusion_modes(&self) -> Vec<FusionMode> {
        if self.monolithic {
            vec![FusionMode::Both]
        } else {
            FusionMode::ALL.to_vec()
        }
    }

    /// Parameters the server averages.
    pub fn uploaded_params(&self) -> ParamSet {
        let mut set = self.shared.to_param_set("shared.");
        if self.monolithic {
            set.extend(self.predictor.to_param_set("predictor."))
                .expect("distinct prefixes");
        }
        set
    }

    /// Adopts the global parameters and representation table.
    pub fn receive(&mut self, down: &DownMessage) -> Result<()> {
        let expected = self.uploaded_params();
        if !expected.same_layout(&down.shared_params) {
            return Err(Error::Protocol(format!(
                "client {}: global parameters do not match the local layout",
                self.id
            )));
        }
        self.shared.assign_from(&down.shared_params, "shared.")?;
        if self.monolithic {
            for (dst, name) in self.predictor.tensors_mut().into_iter().zip(["w1", "b1", "w2", "b2"]) {
                *dst = down
                    .shared_params
                    .get(&format!("predictor.{name}"))
                    .expect("layout checked")
                    .clone();
            }
        }
        self.global_reps = down.rep_table.clone();
        Ok(())
    }

    /// Names of all trainable tensors, in [`Self::trainable_tensors`] order.
    fn trainable_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .shared
            .named_tensors()
            .into_iter()
            .map(|(n, _)| format!("shared.{n}"))
            .collect();
        if let Some(e) = &self.exclusive {
            names.extend(e.named_tensors().into_iter().map(|(n, _)| format!("exclusive.{n}")));
        }
        names.extend(["w1", "b1", "w2", "b2"].map(|n| format!("predictor.{n}")));
        names.extend(["w", "bias"].map(|n| format!("disc.{n}")));
        names
    }

    fn trainable_tensors(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.shared.tensors_mut();
        if let Some(e) = &mut self.exclusive {
            out.extend(e.tensors_mut());
        }
        out.extend(self.predictor.tensors_mut());
        out.extend(self.disc.tensors_mut());
        out
    }

    /// One optimisation step on a batch of users. Returns `None` when the
    /// batch has no predictable position.
    fn train_step(
        &mut self,
        users: &[&UserId],
        batch: &SequenceBatch,
        round: usize,
        cfg: &TrainConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<LossBreakdown>> {
        let w = cfg.weights();
        let dim = cfg.model.dim;
        let rows = batch.items().len();
        let real = batch.real_slots();
        let rate = cfg.dropout;

        let mut g = Graph::new();
        let sv = self.shared.bind(&mut g, true);
        let ev = self.exclusive.as_ref().map(|e| e.bind(&mut g, true));
        let pv = self.predictor.bind(&mut g, true);
        let dv = self.disc.bind(&mut g);
        let mut leaves: Vec<Var> = sv.leaves().to_vec();
        if let Some(ev) = &ev {
            leaves.extend_from_slice(ev.leaves());
        }
        leaves.extend([pv.w1, pv.b1, pv.w2, pv.b2, dv.w, dv.bias]);

        let rel_s = sv.relational(&mut g, &self.shared_graph);
        let ds = sv.forward(&mut g, rel_s, batch, Some(Dropout { rate, rng: &mut *rng }));
        let noise = standard_normal(rng, rows, dim);
        let zs = sample_var(&mut g, ds, noise);
        let kl_shared = kl_var(&mut g, ds.mu, ds.sigma, &real);

        let recon = |g: &mut Graph, z: Var, emb: Var| match reconstruction_var(g, z, batch, &pv, emb) {
            Err(Error::EmptyBatch) => Ok(None),
            other => other.map(Some),
        };

        let last = batch.last_slots();
        // InfoNCE between the user vectors of `z` and of a shuffled copy
        let contrast =
            |g: &mut Graph, rng: &mut ChaCha8Rng, enc: &EncoderVars, rel: Var, z: Var| -> Result<Option<Var>> {
                if w.lambda_ <= 0.0 {
                    return Ok(None);
                }
                let aug = augment_shuffle(batch, rng);
                let da = enc.forward(g, rel, &aug, Some(Dropout { rate, rng: &mut *rng }));
                let noise = standard_normal(rng, rows, dim);
                let za = sample_var(g, da, noise);
                let anchors = g.gather(z, last.clone());
                let positives = g.gather(za, last.clone());
                infonce_var(g, anchors, positives, w.tau).map(Some)
            };

        let terms = match &ev {
            None => {
                // single branch: α·(KL + NLL) + γ·NLL + λ·InfoNCE
                let Some(nll) = recon(&mut g, zs, sv.item_emb)? else {
                    return Ok(None);
                };
                let zero = g.constant(Tensor::scalar(0.0));
                let infonce = contrast(&mut g, rng, &sv, rel_s, zs)?;
                TermVars {
                    kl_shared,
                    kl_exclusive: zero,
                    joint_nll: nll,
                    jsd: None,
                    exclusive_nll: nll,
                    infonce,
                }
            }
            Some(ev) => {
                let rel_e = ev.relational(&mut g, &self.local_graph);
                let de = ev.forward(&mut g, rel_e, batch, Some(Dropout { rate, rng: &mut *rng }));
                let noise = standard_normal(rng, rows, dim);
                let ze = sample_var(&mut g, de, noise);
                let kl_exclusive = kl_var(&mut g, de.mu, de.sigma, &real);
                let Some(exclusive_nll) = recon(&mut g, ze, ev.item_emb)? else {
                    return Ok(None);
                };
                let joint_nll = if cfg.variant.per_branch_elbo() {
                    let Some(shared_nll) = recon(&mut g, zs, ev.item_emb)? else {
                        return Ok(None);
                    };
                    g.add(shared_nll, exclusive_nll)
                } else {
                    let joint = g.add(zs, ze);
                    let Some(nll) = recon(&mut g, joint, ev.item_emb)? else {
                        return Ok(None);
                    };
                    nll
                };

                let jsd = if w.beta > 0.0 && round > 0 {
                    let with_global: Vec<usize> = (0..users.len())
                        .filter(|&b| self.global_reps.contains_key(users[b]))
                        .collect();
                    if with_global.is_empty() {
                        None
                    } else {
                        let slots: Vec<usize> = with_global.iter().map(|&b| last[b]).collect();
                        let zg = Tensor::from_fn(with_global.len(), dim, |i, j| {
                            let rep = &self.global_reps[users[with_global[i]]];
                            rep.get(rep.rows() - 1, j)
                        });
                        let zs_u = g.gather(zs, slots.clone());
                        let ze_u = g.gather(ze, slots);
                        let zneg = g.detach(ze_u);
                        let zg = g.constant(zg);
                        Some(jsd_var(&mut g, zs_u, zneg, zg, dv)?)
                    }
                } else {
                    None
                };

                let infonce = contrast(&mut g, rng, ev, rel_e, ze)?;
                TermVars {
                    kl_shared,
                    kl_exclusive,
                    joint_nll,
                    jsd,
                    exclusive_nll,
                    infonce,
                }
            }
        };

        let (total, breakdown) = terms.combine(&mut g, &w);
        if !g.value(total).item().is_finite() {
            let dump = serde_json::to_string(&breakdown).unwrap_or_default();
            log::error!("client {} round {round}: non-finite loss {dump}", self.id);
            return Err(Error::ClientAbort {
                round,
                client: self.id,
                message: format!("non-finite loss; terms {dump}"),
            });
        }
        let grads = g.backward(total);
        let names = self.trainable_names();
        let grad_list: Vec<Option<Tensor>> = leaves.iter().map(|&v| grads.get(v).cloned()).collect();
        let lr = cfg.lr;
        let mut opt = std::mem::replace(&mut self.optimizer, Adam::new(lr));
        opt.lr = lr;
        opt.update(
            names
                .into_iter()
                .zip(self.trainable_tensors())
                .zip(grad_list.iter())
                .map(|((n, p), gr)| (n, p, gr.as_ref())),
        );
        self.optimizer = opt;
        Ok(Some(breakdown))
    }

    fn train_sequences(&self) -> Vec<(&UserId, &[usize])> {
        self.domain.train.iter().map(|(u, s)| (u, s.items.as_slice())).collect()
    }

    /// One pass over the training sequences in a seeded random order.
    /// Returns the mean breakdown over batches.
    pub fn local_epoch(&mut self, round: usize, epoch: usize, cfg: &TrainConfig) -> Result<LossBreakdown> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(
            cfg.seed,
            &[TAG_TRAIN, self.id as u64, round as u64, epoch as u64],
        ));
        let mut order: Vec<(UserId, Vec<usize>)> = self
            .train_sequences()
            .into_iter()
            .map(|(u, s)| (u.clone(), s.to_vec()))
            .collect();
        order.shuffle(&mut rng);
        let mut mean = LossBreakdown::default();
        let mut batches = 0usize;
        let mut parts = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let users: Vec<&UserId> = chunk.iter().map(|(u, _)| u).collect();
            let seqs: Vec<&[usize]> = chunk.iter().map(|(_, s)| s.as_slice()).collect();
            let batch = SequenceBatch::left_padded(&seqs, cfg.model.max_len);
            if let Some(b) = self.train_step(&users, &batch, round, cfg, &mut rng)? {
                parts.push(b);
                batches += 1;
            }
        }
        for p in &parts {
            mean.add_scaled(p, 1.0 / batches.max(1) as f64);
        }
        Ok(mean)
    }

    /// All local epochs of one round; returns the last epoch's mean breakdown.
    pub fn train_round(&mut self, round: usize, cfg: &TrainConfig) -> Result<LossBreakdown> {
        let mut last = LossBreakdown::default();
        for epoch in 0..cfg.local_epochs {
            last = self.local_epoch(round, epoch, cfg)?;
        }
        Ok(last)
    }

    /// Posterior means of the shared branch over each user's full training
    /// sequence (`T × d` per user).
    pub fn shared_representations(&self) -> Result<BTreeMap<UserId, Tensor>> {
        let t = self.shared.shape.max_len;
        let d = self.shared.shape.dim;
        let seqs = self.train_sequences();
        let mut out = BTreeMap::new();
        for chunk in seqs.chunks(INFERENCE_BATCH) {
            let items: Vec<&[usize]> = chunk.iter().map(|(_, s)| *s).collect();
            let batch = SequenceBatch::left_padded(&items, t);
            let dist = encode(&batch, &self.shared_graph, &self.shared, None)?;
            for (b, (u, _)) in chunk.iter().enumerate() {
                let rows: Vec<usize> = (b * t..(b + 1) * t).collect();
                let rep = dist.mu.gather_rows(&rows);
                debug_assert_eq!(rep.shape(), (t, d));
                out.insert((*u).clone(), rep);
            }
        }
        Ok(out)
    }

    /// Builds the outbound message of this round.
    pub fn upload(&self) -> Result<UpMessage> {
        Ok(UpMessage {
            client_id: self.id,
            shared_params: self.uploaded_params(),
            rep_table: if self.monolithic {
                BTreeMap::new()
            } else {
                self.shared_representations()?
            },
            sample_count: self.sample_count(),
        })
    }

    /// Ranking metrics on `split` for every supported fusion mode, using
    /// posterior means of both branches.
    pub fn evaluate(&self, split: Split, cfg: &TrainConfig) -> Result<BTreeMap<FusionMode, Metrics>> {
        let cases = eval_cases(&self.domain, split);
        if cases.is_empty() {
            return Err(Error::Config(format!(
                "domain `{}` has no {split} items to evaluate",
                self.domain.domain_name
            )));
        }
        let negatives = case_negatives(&self.domain, &cases, cfg.negatives_per_eval, cfg.seed, self.id);
        let modes = self.fusion_modes();
        let mut ranks: BTreeMap<FusionMode, Vec<usize>> = modes.iter().map(|&m| (m, Vec::new())).collect();
        let t = cfg.model.max_len;
        let item_emb = match &self.exclusive {
            Some(e) => &e.item_emb,
            None => &self.shared.item_emb,
        };
        for (cs, negs) in cases.chunks(INFERENCE_BATCH).zip(negatives.chunks(INFERENCE_BATCH)) {
            let prefixes: Vec<&[usize]> = cs.iter().map(|c| c.prefix.as_slice()).collect();
            let batch = SequenceBatch::left_padded(&prefixes, t);
            let zs = encode(&batch, &self.shared_graph, &self.shared, None)?.mu;
            let ze = match &self.exclusive {
                Some(e) => encode(&batch, &self.local_graph, e, None)?.mu,
                None => Tensor::zeros(zs.rows(), zs.cols()),
            };
            for &m in &modes {
                let scores = predict_scores(&zs, &ze, t, &self.predictor, item_emb, m)?;
                ranks
                    .get_mut(&m)
                    .expect("mode listed")
                    .extend(rank_cases(&scores, cs, negs));
            }
        }
        ranks
            .into_iter()
            .map(|(m, r)| Ok((m, compute_metrics(&r, cfg.eval_k)?)))
            .collect()
    }

    /// Every tensor of the client, for checkpoints.
    pub fn to_param_set(&self) -> ParamSet {
        let mut set = self.shared.to_param_set("shared.");
        let mut add = |s: ParamSet| set.extend(s).expect("distinct prefixes");
        if let Some(e) = &self.exclusive {
            add(e.to_param_set("exclusive."));
        }
        add(self.predictor.to_param_set("predictor."));
        add(self.disc.to_param_set("disc."));
        add(self.optimizer.to_param_set("adam."));
        set
    }

    /// Restores tensors written by [`Self::to_param_set`].
    pub fn restore(&mut self, set: &ParamSet, adam_step: u64) -> Result<()> {
        self.shared.assign_from(set, "shared.")?;
        if let Some(e) = &mut self.exclusive {
            e.assign_from(set, "exclusive.")?;
        }
        let fetch = |name: String| {
            set.get(&name)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
        };
        for (dst, n) in self.predictor.tensors_mut().into_iter().zip(["w1", "b1", "w2", "b2"]) {
            *dst = fetch(format!("predictor.{n}"))?;
        }
        for (dst, n) in self.disc.tensors_mut().into_iter().zip(["w", "bias"]) {
            *dst = fetch(format!("disc.{n}"))?;
        }
        self.optimizer.restore(set, "adam.", adam_step);
        Ok(())
    }
}

/// Adopts `down` (when given), trains for the configured local epochs and
/// returns the outbound message with the round's loss breakdown.
pub fn client_update(
    state: &mut ClientState,
    down: &DownMessage,
    cfg: &TrainConfig,
) -> Result<(UpMessage, LossBreakdown)> {
    cfg.validate()?;
    state.receive(down)?;
    let losses = state.train_round(down.round, cfg)?;
    Ok((state.upload()?, losses))
}
