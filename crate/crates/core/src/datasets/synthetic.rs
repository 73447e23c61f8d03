//! Seeded multi-domain scenarios with a controllable share of
//! domain-exclusive behaviour.
//!
//! Each domain's item vocabulary is cut in two halves. The first half is
//! partitioned into `shared_factors` clusters laid out identically in every
//! domain; the second half into `exclusive_factors` clusters whose members
//! are drawn from a per-domain permutation of that half, so the same item
//! index means something different in every domain. A user carries one
//! shared preference vector (the same in every domain) and one exclusive
//! preference vector per domain.
//! Every position draws an exclusive cluster with probability
//! `heterogeneity`, a shared cluster otherwise, then an item uniformly from
//! the cluster.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::preprocess::split_sequences;
use super::{DomainDataset, UserSequence};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub num_domains: usize,
    pub users: usize,
    pub shared_factors: usize,
    pub exclusive_factors: usize,
    /// Real items per domain (the padding slot comes on top).
    pub vocab_per_domain: usize,
    pub seq_len_range: (usize, usize),
    pub heterogeneity: f64,
    pub seed: u64,
    /// Inverse temperature turning preference vectors into cluster choices.
    pub concentration: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            num_domains: 3,
            users: 300,
            shared_factors: 20,
            exclusive_factors: 20,
            vocab_per_domain: 200,
            seq_len_range: (10, 16),
            heterogeneity: 0.6,
            seed: 0,
            concentration: 3.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.heterogeneity) {
            return fail(format!("heterogeneity {} outside [0, 1]", self.heterogeneity));
        }
        let (lo, hi) = self.seq_len_range;
        if lo < 4 || hi > 16 || lo > hi {
            return fail(format!("sequence length range {lo}..={hi} must lie within 4..=16"));
        }
        if self.num_domains == 0 || self.users == 0 {
            return fail("scenario needs at least one domain and one user".into());
        }
        if self.shared_factors == 0 || self.exclusive_factors == 0 {
            return fail("factor counts must be positive".into());
        }
        let half = self.vocab_per_domain / 2;
        if half < self.shared_factors || self.vocab_per_domain - half < self.exclusive_factors {
            return fail(format!(
                "vocabulary of {} cannot hold {} shared and {} exclusive clusters",
                self.vocab_per_domain, self.shared_factors, self.exclusive_factors
            ));
        }
        if !(self.concentration.is_finite() && self.concentration >= 0.0) {
            return fail("concentration must be a non-negative number".into());
        }
        Ok(())
    }

    fn shared_block(&self) -> usize {
        self.vocab_per_domain / 2
    }

    /// Positions `[start, end)` of one cluster inside its block.
    fn cluster_span(&self, cluster: ClusterId) -> (usize, usize) {
        let (size, count, c) = match cluster {
            ClusterId::Shared(c) => (self.shared_block(), self.shared_factors, c),
            ClusterId::Exclusive(c) => (self.vocab_per_domain - self.shared_block(), self.exclusive_factors, c),
        };
        (c * size / count, (c + 1) * size / count)
    }

    /// Items of the exclusive block of `domain`, in cluster order.
    fn exclusive_layout(&self, domain: usize) -> Vec<usize> {
        let mut items: Vec<usize> = (1 + self.shared_block()..=self.vocab_per_domain).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(self.seed, &[TAG_LAYOUT, domain as u64]));
        items.shuffle(&mut rng);
        items
    }
}

const TAG_LAYOUT: u64 = 0x1a70;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ClusterId {
    Shared(usize),
    Exclusive(usize),
}

/// Generating cluster of an item in synthetic domain `domain`.
pub fn item_cluster(cfg: &ScenarioConfig, domain: usize, item: usize) -> Option<ClusterId> {
    if item == 0 || item > cfg.vocab_per_domain {
        return None;
    }
    let (pos, clusters): (usize, Vec<ClusterId>) = if item <= cfg.shared_block() {
        (item - 1, (0..cfg.shared_factors).map(ClusterId::Shared).collect())
    } else {
        let layout = cfg.exclusive_layout(domain);
        (
            layout.iter().position(|&i| i == item).expect("layout covers the block"),
            (0..cfg.exclusive_factors).map(ClusterId::Exclusive).collect(),
        )
    };
    clusters.into_iter().find(|&c| {
        let (a, b) = cfg.cluster_span(c);
        (a..b).contains(&pos)
    })
}

fn preference(rng: &mut ChaCha8Rng, dim: usize, concentration: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..dim)
        .map(|_| concentration * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = raw.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn draw(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let mut u: f64 = rng.gen();
    for (i, p) in probs.iter().enumerate() {
        if u < *p {
            return i;
        }
        u -= p;
    }
    probs.len() - 1
}

/// Fully overlapping users across `num_domains` domains, already split.
pub fn generate_synthetic(cfg: &ScenarioConfig) -> Result<Vec<DomainDataset>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shared_pref: Vec<Vec<f64>> = (0..cfg.users)
        .map(|_| preference(&mut rng, cfg.shared_factors, cfg.concentration))
        .collect();
    let (lo, hi) = cfg.seq_len_range;
    let mut out = Vec::with_capacity(cfg.num_domains);
    for d in 0..cfg.num_domains {
        let layout = cfg.exclusive_layout(d);
        let mut seqs = Vec::with_capacity(cfg.users);
        for (u, shared) in shared_pref.iter().enumerate() {
            let exclusive = preference(&mut rng, cfg.exclusive_factors, cfg.concentration);
            let len = rng.gen_range(lo..=hi);
            let items = (0..len)
                .map(|_| {
                    if rng.gen::<f64>() < cfg.heterogeneity {
                        let (a, b) = cfg.cluster_span(ClusterId::Exclusive(draw(&mut rng, &exclusive)));
                        layout[rng.gen_range(a..b)]
                    } else {
                        let (a, b) = cfg.cluster_span(ClusterId::Shared(draw(&mut rng, shared)));
                        1 + rng.gen_range(a..b)
                    }
                })
                .collect();
            let mut s = UserSequence::new(format!("u{u:04}"), items);
            s.timestamps = Some((0..len as i64).collect());
            seqs.push(s);
        }
        out.push(split_sequences(format!("domain{d}"), cfg.vocab_per_domain + 1, seqs));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(h: f64, seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            users: 60,
            vocab_per_domain: 40,
            shared_factors: 4,
            exclusive_factors: 4,
            heterogeneity: h,
            seed,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(
            generate_synthetic(&small(0.5, 7)).unwrap(),
            generate_synthetic(&small(0.5, 7)).unwrap()
        );
        assert_ne!(
            generate_synthetic(&small(0.5, 7)).unwrap(),
            generate_synthetic(&small(0.5, 8)).unwrap()
        );
    }

    #[test]
    fn heterogeneity_out_of_range_is_rejected() {
        assert!(matches!(generate_synthetic(&small(1.5, 0)), Err(Error::Config(_))));
        assert!(matches!(generate_synthetic(&small(-0.1, 0)), Err(Error::Config(_))));
    }

    #[test]
    fn degenerate_mixtures_use_one_block() {
        let cfg = small(0.0, 1);
        for ds in generate_synthetic(&cfg).unwrap() {
            ds.validate().unwrap();
            for u in ds.users() {
                assert!(ds
                    .history(&u)
                    .iter()
                    .all(|&i| matches!(item_cluster(&cfg, 0, i), Some(ClusterId::Shared(_)))));
            }
        }
        let cfg = small(1.0, 1);
        for ds in generate_synthetic(&cfg).unwrap() {
            for u in ds.users() {
                assert!(ds
                    .history(&u)
                    .iter()
                    .all(|&i| matches!(item_cluster(&cfg, 0, i), Some(ClusterId::Exclusive(_)))));
            }
        }
    }

    #[test]
    fn users_overlap_and_lengths_in_range() {
        let ds = generate_synthetic(&small(0.5, 3)).unwrap();
        assert_eq!(ds.len(), 3);
        for d in &ds {
            assert_eq!(d.users(), ds[0].users());
            assert_eq!(d.vocab_size, 41);
            for u in d.users() {
                assert!((4..=16).contains(&d.history(&u).len()));
            }
        }
    }

    #[test]
    fn clusters_partition_the_vocabulary() {
        let cfg = ScenarioConfig::default();
        for d in 0..cfg.num_domains {
            let mut sizes: std::collections::HashMap<ClusterId, usize> = Default::default();
            for i in 1..=cfg.vocab_per_domain {
                *sizes
                    .entry(item_cluster(&cfg, d, i).expect("every item has a cluster"))
                    .or_default() += 1;
            }
            assert_eq!(sizes.len(), cfg.shared_factors + cfg.exclusive_factors);
            assert_eq!(item_cluster(&cfg, d, 0), None);
        }
        // exclusive layouts differ between domains, shared ones do not
        let last = cfg.vocab_per_domain;
        assert!((1 + cfg.vocab_per_domain / 2..=last).any(|i| item_cluster(&cfg, 0, i) != item_cluster(&cfg, 1, i)));
        assert!((1..=cfg.vocab_per_domain / 2).all(|i| item_cluster(&cfg, 0, i) == item_cluster(&cfg, 1, i)));
    }
}
