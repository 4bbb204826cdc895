//! Greedy assignment of detected person crops to reference identities.

use alloc::vec::Vec;

use crate::array::RealArray;
use crate::error::{Error, Result};

/// Cosine similarities, `n_crops × n_refs`, entries in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: RealArray,
}

impl SimilarityMatrix {
    pub fn new(values: RealArray) -> Result<Self> {
        if values.ndim() != 2 || values.rows() == 0 || values.cols() == 0 {
            return Err(Error::validation("similarity matrix must be a non-empty 2-D array"));
        }
        if values.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::validation("similarities must lie in [-1, 1]"));
        }
        Ok(Self { values })
    }

    /// Builds from nested rows; NaN or ragged input is a validation error.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::validation("similarity rows differ in length"));
        }
        if rows.iter().flatten().any(|v| v.is_nan()) {
            return Err(Error::validation("similarity matrix contains NaN"));
        }
        let data = rows.iter().flatten().copied().collect();
        let values = RealArray::new(&[rows.len(), n], data).map_err(|e| Error::validation(alloc::format!("{e}")))?;
        Self::new(values)
    }

    pub fn n_crops(&self) -> usize {
        self.values.rows()
    }

    pub fn n_refs(&self) -> usize {
        self.values.cols()
    }

    pub fn get(&self, crop: usize, reference: usize) -> f64 {
        self.values.data()[crop * self.n_refs() + reference]
    }

    pub fn values(&self) -> &RealArray {
        &self.values
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// `(crop_index, ref_index)` in selection order.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_crops: Vec<usize>,
    pub unmatched_refs: Vec<usize>,
}

/// Repeatedly takes the largest remaining entry among unmatched rows and
/// columns. Ties go to the smallest crop index, then the smallest ref index.
pub fn greedy_match(sim: &SimilarityMatrix) -> MatchResult {
    let (n, m) = (sim.n_crops(), sim.n_refs());
    let mut crop_used = alloc::vec![false; n];
    let mut ref_used = alloc::vec![false; m];
    let mut pairs = Vec::with_capacity(n.min(m));
    while pairs.len() < n.min(m) {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in (0..n).filter(|&i| !crop_used[i]) {
            for j in (0..m).filter(|&j| !ref_used[j]) {
                let v = sim.get(i, j);
                if best.is_none_or(|(_, _, b)| v > b) {
                    best = Some((i, j, v));
                }
            }
        }
        let (i, j, _) = best.expect("free row and column remain");
        crop_used[i] = true;
        ref_used[j] = true;
        pairs.push((i, j));
    }
    MatchResult {
        pairs,
        unmatched_crops: (0..n).filter(|&i| !crop_used[i]).collect(),
        unmatched_refs: (0..m).filter(|&j| !ref_used[j]).collect(),
    }
}
