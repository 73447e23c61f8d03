use serde::{Deserialize, Serialize};

use super::DomainDataset;
use crate::error::{Error, Result};
use crate::tensor::SparseMatrix;

/// Row-normalised item relationship matrix of one domain.
///
/// Two items are related when they appear next to each other in some
/// training sequence; every item also carries a self-loop. Edges are
/// unweighted before normalisation, so repeating a sequence changes nothing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemGraph {
    adjacency: SparseMatrix,
}

impl ItemGraph {
    pub fn from_sequences<'a>(vocab_size: usize, sequences: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let mut neighbours: Vec<Vec<usize>> = (0..vocab_size).map(|i| vec![i]).collect();
        for seq in sequences {
            for w in seq.windows(2) {
                let (a, b) = (w[0], w[1]);
                neighbours[a].push(b);
                neighbours[b].push(a);
            }
        }
        let rows = neighbours
            .into_iter()
            .map(|mut n| {
                n.sort_unstable();
                n.dedup();
                let w = 1.0 / n.len() as f64;
                n.into_iter().map(|j| (j, w)).collect()
            })
            .collect();
        Self {
            adjacency: SparseMatrix::from_rows(vocab_size, rows),
        }
    }

    /// Pure self-loops.
    pub fn identity(vocab_size: usize) -> Self {
        Self::from_sequences(vocab_size, std::iter::empty())
    }

    pub fn vocab_size(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn adjacency(&self) -> &SparseMatrix {
        &self.adjacency
    }

    /// Extends the vocabulary with isolated (self-loop only) items.
    pub fn padded_to(&self, vocab_size: usize) -> Result<Self> {
        let n = self.vocab_size();
        if vocab_size < n {
            return Err(Error::Shape(format!(
                "cannot shrink item graph from {n} to {vocab_size}"
            )));
        }
        let rows = (0..vocab_size)
            .map(|i| {
                if i < n {
                    self.adjacency.row(i).collect()
                } else {
                    vec![(i, 1.0)]
                }
            })
            .collect();
        Ok(Self {
            adjacency: SparseMatrix::from_rows(vocab_size, rows),
        })
    }
}

/// Builds the item graph from a dataset's training fragments.
pub fn build_item_graph(train: &DomainDataset) -> ItemGraph {
    ItemGraph::from_sequences(train.vocab_size, train.train.values().map(|s| s.items.as_slice()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{UserSequence, PAD};

    #[test]
    fn chain_of_three() {
        // a=1, b=2, c=3
        let g = ItemGraph::from_sequences(4, [&[1usize, 2, 3][..]]);
        let a = g.adjacency();
        assert_eq!(a.get(1, 1), 0.5);
        assert_eq!(a.get(1, 2), 0.5);
        assert_eq!(a.get(1, 3), 0.0);
        for j in 1..4 {
            assert!((a.get(2, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(a.get(PAD, PAD), 1.0);
    }

    #[test]
    fn untouched_item_is_a_pure_self_loop() {
        let g = ItemGraph::from_sequences(5, [&[1usize, 2][..]]);
        assert_eq!(g.adjacency().row(4).collect::<Vec<_>>(), vec![(4, 1.0)]);
    }

    #[test]
    fn reversed_duplicate_changes_nothing() {
        let one = ItemGraph::from_sequences(3, [&[1usize, 2][..]]);
        let two = ItemGraph::from_sequences(3, [&[1usize, 2][..], &[2, 1][..]]);
        assert_eq!(one, two);
    }

    #[test]
    fn rows_sum_to_one_and_padding_extends() {
        let ds = DomainDataset::raw(
            "d",
            8,
            vec![
                UserSequence::new("a", vec![1, 4, 2, 7]),
                UserSequence::new("b", vec![3, 3, 5]),
            ],
        );
        let g = build_item_graph(&ds).padded_to(10).unwrap();
        for i in 0..10 {
            assert!((g.adjacency().row_sum(i) - 1.0).abs() < 1e-9);
        }
        assert!(g.padded_to(5).is_err());
    }
}
