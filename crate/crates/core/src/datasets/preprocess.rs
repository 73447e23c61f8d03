use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DomainDataset, UserSequence, PAD};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Users and items with fewer interactions are removed.
    pub min_interactions: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            min_interactions: 10,
            min_len: 4,
            max_len: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

/// Earliest 80% (at least two items held out) to train; the held-out tail
/// is split evenly, with the odd item going to test.
pub fn split_chronological(len: usize) -> SplitSizes {
    if len < 3 {
        return SplitSizes {
            train: len,
            valid: 0,
            test: 0,
        };
    }
    let train = (len * 4 / 5).min(len - 2);
    let held = len - train;
    let valid = held / 2;
    SplitSizes {
        train,
        valid,
        test: held - valid,
    }
}

fn split_into(ds: &mut DomainDataset, sequences: Vec<UserSequence>) {
    ds.train.clear();
    ds.valid.clear();
    ds.test.clear();
    for s in sequences {
        let sz = split_chronological(s.len());
        let u = s.user_id.clone();
        ds.train.insert(u.clone(), s.slice(0..sz.train));
        if sz.valid > 0 {
            ds.valid.insert(u.clone(), s.slice(sz.train..sz.train + sz.valid));
        }
        if sz.test > 0 {
            ds.test.insert(u, s.slice(sz.train + sz.valid..s.len()));
        }
    }
}

/// Truncates to the most recent `max_len` items, removes sparse users and
/// items until nothing changes, re-indexes items densely, and splits each
/// history chronologically. Applying it twice gives the same result.
pub fn preprocess(raw: &DomainDataset, cfg: &PreprocessConfig) -> Result<DomainDataset> {
    if cfg.min_len == 0 || cfg.max_len < cfg.min_len {
        return Err(Error::Config(format!(
            "invalid sequence length bounds {}..={}",
            cfg.min_len, cfg.max_len
        )));
    }
    let mut seqs = raw.merged_sequences();
    for s in &mut seqs {
        if s.len() > cfg.max_len {
            *s = s.slice(s.len() - cfg.max_len..s.len());
        }
    }
    let min_user = cfg.min_interactions.max(cfg.min_len);
    loop {
        let mut counts = vec![0usize; raw.vocab_size];
        for s in &seqs {
            for &i in &s.items {
                counts[i] += 1;
            }
        }
        let mut changed = false;
        for s in &mut seqs {
            let keep: Vec<usize> = (0..s.len())
                .filter(|&p| counts[s.items[p]] >= cfg.min_interactions)
                .collect();
            if keep.len() != s.len() {
                changed = true;
                s.items = keep.iter().map(|&p| s.items[p]).collect();
                if let Some(ts) = &mut s.timestamps {
                    *ts = keep.iter().map(|&p| ts[p]).collect();
                }
            }
        }
        let before = seqs.len();
        seqs.retain(|s| s.len() >= min_user);
        changed |= seqs.len() != before;
        if !changed {
            break;
        }
    }
    if seqs.is_empty() {
        return Err(Error::EmptyDomain(raw.domain_name.clone()));
    }

    // dense re-indexing in order of the old index keeps a second pass stable
    let mut used: Vec<usize> = seqs.iter().flat_map(|s| s.items.iter().copied()).collect();
    used.sort_unstable();
    used.dedup();
    let remap: BTreeMap<usize, usize> = used.iter().enumerate().map(|(new, &old)| (old, new + 1)).collect();
    for s in &mut seqs {
        for i in &mut s.items {
            *i = remap[i];
        }
    }
    let item_keys = if raw.item_keys.is_empty() {
        Vec::new()
    } else {
        std::iter::once(raw.item_keys[PAD].clone())
            .chain(used.iter().map(|&old| raw.item_keys[old].clone()))
            .collect()
    };

    let mut out = DomainDataset {
        domain_name: raw.domain_name.clone(),
        vocab_size: used.len() + 1,
        item_keys,
        train: BTreeMap::new(),
        valid: BTreeMap::new(),
        test: BTreeMap::new(),
    };
    split_into(&mut out, seqs);
    Ok(out)
}

/// Splits whole histories that are already filtered (synthetic data).
pub(crate) fn split_sequences(domain_name: String, vocab_size: usize, seqs: Vec<UserSequence>) -> DomainDataset {
    let mut out = DomainDataset::raw(domain_name, vocab_size, Vec::new());
    split_into(&mut out, seqs);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// `n` users who each touch items 1..=len once, oldest first.
    fn dense_users(n: usize, len: usize) -> Vec<UserSequence> {
        (0..n)
            .map(|u| UserSequence::new(format!("u{u:02}"), (1..=len).collect()))
            .collect()
    }

    #[test]
    fn ten_item_user_splits_eight_one_one() {
        let raw = DomainDataset::raw("d", 11, dense_users(10, 10));
        let ds = preprocess(&raw, &PreprocessConfig::default()).unwrap();
        let u = "u00".into();
        assert_eq!(ds.train[&u].items, (1..=8).collect::<Vec<_>>());
        assert_eq!(ds.valid[&u].items, vec![9]);
        assert_eq!(ds.test[&u].items, vec![10]);
    }

    #[test]
    fn short_user_is_dropped() {
        let mut seqs = dense_users(10, 10);
        seqs.push(UserSequence::new("short", vec![1, 2, 3]));
        let ds = preprocess(&DomainDataset::raw("d", 11, seqs), &PreprocessConfig::default()).unwrap();
        assert!(!ds.users().contains(&"short".into()));
        assert_eq!(ds.users().len(), 10);
    }

    #[test]
    fn long_user_keeps_most_recent_sixteen() {
        let seqs = dense_users(12, 20);
        let ds = preprocess(&DomainDataset::raw("d", 21, seqs), &PreprocessConfig::default()).unwrap();
        let u = "u00".into();
        assert_eq!(ds.history(&u).len(), 16);
        // items 5..=20 survive and are re-indexed to 1..=16
        assert_eq!(ds.history(&u), (1..=16).collect::<Vec<_>>());
        assert_eq!(ds.vocab_size, 17);
        assert_eq!(
            split_chronological(16),
            SplitSizes {
                train: 12,
                valid: 2,
                test: 2
            }
        );
    }

    #[test]
    fn everything_filtered_is_an_error() {
        let raw = DomainDataset::raw("tiny", 4, vec![UserSequence::new("u", vec![1, 2, 3])]);
        assert!(matches!(
            preprocess(&raw, &PreprocessConfig::default()),
            Err(Error::EmptyDomain(_))
        ));
    }

    #[test]
    fn item_filter_cascades_to_users() {
        // item 11 appears only for one user; after it is removed that user
        // has 9 interactions and must go as well.
        let mut seqs = dense_users(10, 10);
        seqs.push(UserSequence::new("edge", (2..=10).chain([11]).collect()));
        let ds = preprocess(&DomainDataset::raw("d", 12, seqs), &PreprocessConfig::default()).unwrap();
        assert!(!ds.users().contains(&"edge".into()));
        assert_eq!(ds.vocab_size, 11);
    }

    #[test]
    fn split_rule_small_lengths() {
        assert_eq!(
            split_chronological(4),
            SplitSizes {
                train: 2,
                valid: 1,
                test: 1
            }
        );
        assert_eq!(
            split_chronological(5),
            SplitSizes {
                train: 3,
                valid: 1,
                test: 1
            }
        );
        assert_eq!(
            split_chronological(10),
            SplitSizes {
                train: 8,
                valid: 1,
                test: 1
            }
        );
    }

    proptest! {
        #[test]
        fn preprocess_is_a_fixed_point(
            seqs in prop::collection::vec(prop::collection::vec(1usize..8, 1..24), 1..40),
            min_interactions in 1usize..6,
        ) {
            let seqs: Vec<UserSequence> = seqs
                .into_iter()
                .enumerate()
                .map(|(u, items)| UserSequence::new(format!("u{u}"), items))
                .collect();
            let raw = DomainDataset::raw("d", 8, seqs);
            let cfg = PreprocessConfig { min_interactions, min_len: 4, max_len: 16 };
            if let Ok(once) = preprocess(&raw, &cfg) {
                let twice = preprocess(&once, &cfg).unwrap();
                prop_assert_eq!(&twice, &once);
                for u in once.users() {
                    let train = &once.train[&u];
                    let held = once.valid.get(&u).map_or(0, |s| s.len()) + once.test.get(&u).map_or(0, |s| s.len());
                    prop_assert!(train.len() >= held);
                    prop_assert!((4..=16).contains(&once.history(&u).len()));
                }
                once.validate().unwrap();
            }
        }
    }
}
