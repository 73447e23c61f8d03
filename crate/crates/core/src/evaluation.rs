//! Leave-one-out ranking evaluation.
//!
//! Every held-out item is scored together with sampled negatives the user
//! never interacted with; the target's rank (ties counted against it) feeds
//! MRR, HR@k and NDCG@k. Negative samples come from a generator seeded by
//! `(seed, domain, user, position)`, so they do not depend on evaluation
//! order or on the fusion mode being probed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{DomainDataset, UserId, PAD};
use crate::error::{Error, Result};
use crate::seed;
use crate::srd::PredictorParams;
use crate::tensor::Tensor;

/// Which representation feeds the predictor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Shared,
    Exclusive,
    Both,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Shared, FusionMode::Exclusive, FusionMode::Both];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Shared => "shared",
            FusionMode::Exclusive => "exclusive",
            FusionMode::Both => "both",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Next-item logits over the vocabulary at the final slot of each sequence.
/// `zs` and `ze` hold `batch·T` rows.
pub fn predict_scores(
    zs: &Tensor,
    ze: &Tensor,
    seq_len: usize,
    theta: &PredictorParams,
    item_emb: &Tensor,
    fusion: FusionMode,
) -> Result<Tensor> {
    if zs.shape() != ze.shape() || seq_len == 0 || !zs.rows().is_multiple_of(seq_len) {
        return Err(Error::Shape(format!(
            "representations {:?} and {:?} do not form sequences of {seq_len}",
            zs.shape(),
            ze.shape()
        )));
    }
    let last: Vec<usize> = (1..=zs.rows() / seq_len).map(|b| b * seq_len - 1).collect();
    let z = match fusion {
        FusionMode::Shared => zs.gather_rows(&last),
        FusionMode::Exclusive => ze.gather_rows(&last),
        FusionMode::Both => zs.gather_rows(&last).add(&ze.gather_rows(&last)),
    };
    Ok(theta.transform(&z).matmul_nt(item_emb))
}

/// `n` distinct negatives drawn uniformly from items that are neither the
/// padding slot, the target, nor in `history`. When too few such items
/// exist, only the padding slot and the target are excluded.
pub fn sample_negatives(
    history: &BTreeSet<usize>,
    target: usize,
    vocab: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut pool: Vec<usize> = (1..vocab).filter(|&i| i != target && !history.contains(&i)).collect();
    if pool.len() < n {
        log::warn!(
            "only {} unseen items for {n} negatives; sampling from all items except the target",
            pool.len()
        );
        pool = (1..vocab).filter(|&i| i != target).collect();
    }
    let n = n.min(pool.len());
    index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect()
}

/// 1 + number of negatives scoring at least as high as the target.
pub fn rank_of_target(scores: &[f64], target: usize, negatives: &[usize]) -> usize {
    let t = scores[target];
    1 + negatives.iter().filter(|&&n| scores[n] >= t).count()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mrr: f64,
    pub hr_at_k: f64,
    pub ndcg_at_k: f64,
}

pub fn compute_metrics(ranks: &[usize], k: usize) -> Result<Metrics> {
    if ranks.is_empty() {
        return Err(Error::Config("cannot compute metrics over zero ranks".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Config("ranks are 1-based".into()));
    }
    let n = ranks.len() as f64;
    let mut m = Metrics::default();
    for &r in ranks {
        m.mrr += 1.0 / r as f64;
        if r <= k {
            m.hr_at_k += 1.0;
            m.ndcg_at_k += 1.0 / ((r + 1) as f64).log2();
        }
    }
    m.mrr /= n;
    m.hr_at_k /= n;
    m.ndcg_at_k /= n;
    Ok(m)
}

/// Unweighted mean over domains.
pub fn average_metrics<'a>(metrics: impl IntoIterator<Item = &'a Metrics>) -> Metrics {
    let mut sum = Metrics::default();
    let mut n = 0.0;
    for m in metrics {
        sum.mrr += m.mrr;
        sum.hr_at_k += m.hr_at_k;
        sum.ndcg_at_k += m.ndcg_at_k;
        n += 1.0;
    }
    if n > 0.0 {
        sum.mrr /= n;
        sum.hr_at_k /= n;
        sum.ndcg_at_k /= n;
    }
    sum
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_domain: BTreeMap<String, Metrics>,
    pub average: Metrics,
    pub fusion_mode: FusionMode,
    pub k: usize,
}

pub const CSV_HEADER: &str = "round,split,fusion,domain,mrr,hr_at_k,ndcg_at_k,k";

impl EvalResult {
    pub fn new(per_domain: BTreeMap<String, Metrics>, fusion_mode: FusionMode, k: usize) -> Self {
        let average = average_metrics(per_domain.values());
        Self {
            per_domain,
            average,
            fusion_mode,
            k,
        }
    }

    /// CSV lines (no header), one per domain plus an `Avg` line.
    pub fn csv_rows(&self, round: usize, split: Split) -> Vec<String> {
        self.per_domain
            .iter()
            .chain(std::iter::once((&"Avg".to_owned(), &self.average)))
            .map(|(d, m)| {
                format!(
                    "{round},{split},{},{d},{:.6},{:.6},{:.6},{}",
                    self.fusion_mode, m.mrr, m.hr_at_k, m.ndcg_at_k, self.k
                )
            })
            .collect()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

/// One held-out prediction: everything before `target` is the input.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCase {
    pub user: UserId,
    pub prefix: Vec<usize>,
    pub target: usize,
    /// Position of the target in the user's full history.
    pub position: usize,
}

/// Every held-out item of `split`, in user order.
pub fn eval_cases(ds: &DomainDataset, split: Split) -> Vec<EvalCase> {
    let mut out = Vec::new();
    for (user, train) in &ds.train {
        let mut prefix = train.items.clone();
        let valid = ds.valid.get(user).map(|s| s.items.as_slice()).unwrap_or(&[]);
        let test = ds.test.get(user).map(|s| s.items.as_slice()).unwrap_or(&[]);
        let held = match split {
            Split::Valid => valid,
            Split::Test => {
                prefix.extend_from_slice(valid);
                test
            }
        };
        for &target in held {
            if !prefix.is_empty() {
                out.push(EvalCase {
                    user: user.clone(),
                    prefix: prefix.clone(),
                    target,
                    position: prefix.len(),
                });
            }
            prefix.push(target);
        }
    }
    out
}

/// Generator dedicated to one evaluation case.
pub fn case_rng(seed: u64, domain: usize, user: &UserId, position: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed::derive(
        seed,
        &[domain as u64, seed::hash_str(user.as_str()), position as u64],
    ))
}

/// Negative candidates of every case; the same for every fusion mode.
pub fn case_negatives(ds: &DomainDataset, cases: &[EvalCase], n: usize, seed: u64, domain: usize) -> Vec<Vec<usize>> {
    cases
        .iter()
        .map(|c| {
            let history: BTreeSet<usize> = ds.history(&c.user).into_iter().filter(|&i| i != PAD).collect();
            let mut rng = case_rng(seed, domain, &c.user, c.position);
            sample_negatives(&history, c.target, ds.vocab_size, n, &mut rng)
        })
        .collect()
}

/// Ranks of each case's target given `scores` (one row per case).
pub fn rank_cases(scores: &Tensor, cases: &[EvalCase], negatives: &[Vec<usize>]) -> Vec<usize> {
    cases
        .iter()
        .zip(negatives)
        .enumerate()
        .map(|(i, (c, neg))| rank_of_target(scores.row(i), c.target, neg))
        .collect()
}
