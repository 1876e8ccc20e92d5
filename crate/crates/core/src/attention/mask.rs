use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Set of `(i, j)` logit positions forced to `-inf`.
///
/// Valid only if every row keeps at least one unmasked position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    n: usize,
    pairs: BTreeSet<(usize, usize)>,
}

impl MaskSet {
    pub fn new(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let pairs: BTreeSet<_> = pairs.into_iter().collect();
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= n || j >= n) {
            return Err(Error::Mask(format!("index ({i}, {j}) out of range for N = {n}")));
        }
        let mask = Self { n, pairs };
        for i in 0..n {
            if mask.unmasked_count(i) == 0 {
                return Err(Error::FullyMaskedRow(i));
            }
        }
        Ok(mask)
    }

    pub fn empty(n: usize) -> Self {
        Self { n, pairs: BTreeSet::new() }
    }

    /// Masks every `(i, j)` with `j > i`.
    pub fn causal(n: usize) -> Self {
        Self { n, pairs: (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect() }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.pairs.contains(&(i, j))
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn unmasked_count(&self, i: usize) -> usize {
        let masked = self.pairs.range((i, 0)..(i + 1, 0)).count();
        self.n - masked
    }

    pub fn row_unmasked_counts(&self) -> Vec<usize> {
        (0..self.n).map(|i| self.unmasked_count(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        let m = MaskSet::causal(4);
        assert_eq!(m.row_unmasked_counts(), vec![1, 2, 3, 4]);
        assert!(m.contains(0, 3));
        assert!(!m.contains(3, 0));
    }

    #[test]
    fn rejects_out_of_range_and_full_rows() {
        assert!(matches!(MaskSet::new(2, [(0, 2)]), Err(Error::Mask(_))));
        assert!(matches!(MaskSet::new(2, [(1, 0), (1, 1)]), Err(Error::FullyMaskedRow(1))));
        assert!(MaskSet::new(2, [(1, 0)]).is_ok());
    }
}
