//! Sorted, duplicate-free sets of 1-based indices.
//!
//! Latent indices live in `1..=N` and view indices in `1..=K`, matching the
//! `[N] = {1, ..., N}` convention used throughout the crate's interfaces.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct IndexSet(Vec<usize>);

impl IndexSet {
    pub fn empty() -> Self {
        IndexSet(Vec::new())
    }

    /// Builds a set from arbitrary 1-based indices; sorts and rejects zero or duplicates.
    pub fn new(indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut v: Vec<usize> = indices.into_iter().collect();
        if v.iter().any(|&i| i == 0) {
            return Err(Error::InvalidIndexSet(format!(
                "indices are 1-based, found 0 in {v:?}"
            )));
        }
        v.sort_unstable();
        let before = v.len();
        v.dedup();
        if v.len() != before {
            return Err(Error::InvalidIndexSet("duplicate index".into()));
        }
        Ok(IndexSet(v))
    }

    /// Like [`IndexSet::new`] but silently deduplicates.
    pub fn from_unsorted(indices: impl IntoIterator<Item = usize>) -> Self {
        let mut v: Vec<usize> = indices.into_iter().filter(|&i| i > 0).collect();
        v.sort_unstable();
        v.dedup();
        IndexSet(v)
    }

    pub fn range(lo: usize, hi: usize) -> Self {
        IndexSet((lo.max(1)..=hi).collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.binary_search(&i).is_ok()
    }

    pub fn max(&self) -> Option<usize> {
        self.0.last().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn intersection(&self, other: &IndexSet) -> IndexSet {
        IndexSet(self.iter().filter(|&i| other.contains(i)).collect())
    }

    pub fn difference(&self, other: &IndexSet) -> IndexSet {
        IndexSet(self.iter().filter(|&i| !other.contains(i)).collect())
    }

    pub fn union(&self, other: &IndexSet) -> IndexSet {
        IndexSet::from_unsorted(self.iter().chain(other.iter()))
    }

    pub fn is_subset(&self, other: &IndexSet) -> bool {
        self.iter().all(|i| other.contains(i))
    }

    pub fn is_disjoint(&self, other: &IndexSet) -> bool {
        self.intersection(other).is_empty()
    }

    /// Zero-based positions of `self`'s members inside `within`, or `None` if not a subset.
    pub fn positions_in(&self, within: &IndexSet) -> Option<Vec<usize>> {
        self.iter()
            .map(|i| within.0.binary_search(&i).ok())
            .collect()
    }

    /// Zero-based indices, for slicing matrix columns.
    pub fn zero_based(&self) -> Vec<usize> {
        self.0.iter().map(|i| i - 1).collect()
    }

    /// Bitmask with bit `i - 1` set for each member. Only valid when every index is at most 64.
    pub fn to_mask(&self) -> u64 {
        self.0.iter().fold(0u64, |m, &i| m | (1u64 << (i - 1)))
    }

    pub fn from_mask(mask: u64) -> Self {
        IndexSet((0..64).filter(|b| mask >> b & 1 == 1).map(|b| b + 1).collect())
    }
}

impl TryFrom<Vec<usize>> for IndexSet {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        IndexSet::new(v)
    }
}

impl From<IndexSet> for Vec<usize> {
    fn from(s: IndexSet) -> Self {
        s.0
    }
}

impl fmt::Display for IndexSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (n, i) in self.0.iter().enumerate() {
            if n > 0 {
                write!(f, ",")?;
            }
            write!(f, "{i}")?;
        }
        write!(f, "}}")
    }
}
