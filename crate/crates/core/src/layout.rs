use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Partition of `n` units into `K` contiguous strata.
///
/// Units are indexed `0..n`; stratum `k` owns the half-open range
/// `offset(k)..offset(k) + size(k)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct StratumLayout {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
}

impl StratumLayout {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::InvalidInput(
                "layout needs at least one stratum".into(),
            ));
        }
        if let Some(k) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidInput(format!("stratum {k} is empty")));
        }
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for &s in &sizes {
            acc += s;
            offsets.push(acc);
        }
        Ok(Self { sizes, offsets })
    }

    /// `k` strata of `size` units each.
    pub fn uniform(k: usize, size: usize) -> Result<Self> {
        Self::new(vec![size; k])
    }

    pub fn n(&self) -> usize {
        self.offsets[self.sizes.len()]
    }

    pub fn num_strata(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn size(&self, k: usize) -> usize {
        self.sizes[k]
    }

    pub fn offset(&self, k: usize) -> usize {
        self.offsets[k]
    }

    pub fn range(&self, k: usize) -> Range<usize> {
        self.offsets[k]..self.offsets[k + 1]
    }

    /// Stratum that owns unit `i`.
    pub fn stratum_of(&self, i: usize) -> usize {
        assert!(i < self.n(), "unit {i} out of range");
        self.offsets.partition_point(|&o| o <= i) - 1
    }

    pub fn min_size(&self) -> usize {
        *self.sizes.iter().min().expect("non-empty layout")
    }

    /// `n - K`, the number of free transposition slots.
    pub fn degrees_of_freedom(&self) -> usize {
        self.n() - self.num_strata()
    }
}

impl TryFrom<Vec<usize>> for StratumLayout {
    type Error = Error;

    fn try_from(sizes: Vec<usize>) -> Result<Self> {
        Self::new(sizes)
    }
}

impl From<StratumLayout> for Vec<usize> {
    fn from(layout: StratumLayout) -> Self {
        layout.sizes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_cover_units() {
        let layout = StratumLayout::new(vec![2, 1, 3]).unwrap();
        assert_eq!(layout.n(), 6);
        assert_eq!(layout.range(0), 0..2);
        assert_eq!(layout.range(1), 2..3);
        assert_eq!(layout.range(2), 3..6);
        let owners: Vec<_> = (0..6).map(|i| layout.stratum_of(i)).collect();
        assert_eq!(owners, vec![0, 0, 1, 2, 2, 2]);
        assert_eq!(layout.degrees_of_freedom(), 3);
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(StratumLayout::new(vec![]).is_err());
        assert!(StratumLayout::new(vec![3, 0]).is_err());
    }
}
