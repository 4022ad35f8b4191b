//! Ranking metrics: precision and reciprocal rank at cutoffs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CUTOFFS: [usize; 2] = [10, 20];

/// 1-based rank of `target`: items scoring strictly higher, plus equal-score
/// items with a lower index, come first.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > s || (v == s && i < target))
        .count()
}

/// Percentages over a test set, keyed by cutoff.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub p_at: BTreeMap<usize, f64>,
    pub mrr_at: BTreeMap<usize, f64>,
    pub cases: usize,
}

#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    cutoffs: Vec<usize>,
    hits: Vec<usize>,
    reciprocal: Vec<f64>,
    cases: usize,
}

impl MetricAccumulator {
    pub fn new(cutoffs: &[usize]) -> Self {
        Self {
            cutoffs: cutoffs.to_vec(),
            hits: vec![0; cutoffs.len()],
            reciprocal: vec![0.0; cutoffs.len()],
            cases: 0,
        }
    }

    pub fn add_rank(&mut self, rank: usize) {
        for (i, &k) in self.cutoffs.iter().enumerate() {
            if rank <= k {
                self.hits[i] += 1;
                self.reciprocal[i] += 1.0 / rank as f64;
            }
        }
        self.cases += 1;
    }

    pub fn add(&mut self, scores: &[f64], target: usize) -> Result<()> {
        if target >= scores.len() {
            return Err(Error::invalid(format!(
                "target {target} outside {} scores",
                scores.len()
            )));
        }
        self.add_rank(rank_of(scores, target));
        Ok(())
    }

    pub fn finish(&self) -> Result<RankingMetrics> {
        if self.cases == 0 {
            return Err(Error::invalid("cannot compute metrics over an empty test set"));
        }
        let n = self.cases as f64;
        Ok(RankingMetrics {
            p_at: self
                .cutoffs
                .iter()
                .zip(&self.hits)
                .map(|(&k, &h)| (k, 100.0 * h as f64 / n))
                .collect(),
            mrr_at: self
                .cutoffs
                .iter()
                .zip(&self.reciprocal)
                .map(|(&k, &r)| (k, 100.0 * r / n))
                .collect(),
            cases: self.cases,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rank_three_and_twenty_five() {
        let mut scores: Vec<f64> = (0..30).map(|i| -(i as f64)).collect();
        let mut acc = MetricAccumulator::new(&DEFAULT_CUTOFFS);
        acc.add(&scores, 2).unwrap();
        let m = acc.finish().unwrap();
        assert_eq!(m.p_at[&20], 100.0);
        assert!((m.mrr_at[&20] - 100.0 / 3.0).abs() < 1e-12);

        scores.swap(0, 24);
        let mut acc = MetricAccumulator::new(&DEFAULT_CUTOFFS);
        acc.add(&scores, 0).unwrap();
        let m = acc.finish().unwrap();
        assert_eq!((m.p_at[&20], m.mrr_at[&20]), (0.0, 0.0));
    }

    #[test]
    fn ties_rank_lower_index_first() {
        let scores = [1.0, 5.0, 5.0, 5.0];
        assert_eq!(rank_of(&scores, 1), 1);
        assert_eq!(rank_of(&scores, 3), 3);
        assert_eq!(rank_of(&scores, 0), 4);
    }

    #[test]
    fn empty_and_out_of_range() {
        assert!(MetricAccumulator::new(&DEFAULT_CUTOFFS).finish().is_err());
        assert!(MetricAccumulator::new(&DEFAULT_CUTOFFS).add(&[1.0], 1).is_err());
    }

    proptest! {
        #[test]
        fn shift_invariance_and_monotone_cutoffs(
            scores in proptest::collection::vec(-5i32..5, 1..50),
            shift in -100.0f64..100.0,
            t in 0usize..50,
        ) {
            let t = t % scores.len();
            let s: Vec<f64> = scores.iter().map(|&v| f64::from(v)).collect();
            let shifted: Vec<f64> = s.iter().map(|v| v + shift.round()).collect();
            prop_assert_eq!(rank_of(&s, t), rank_of(&shifted, t));
            let mut acc = MetricAccumulator::new(&DEFAULT_CUTOFFS);
            acc.add(&s, t).unwrap();
            let m = acc.finish().unwrap();
            prop_assert!(m.p_at[&10] <= m.p_at[&20]);
            prop_assert!(m.mrr_at[&10] <= m.mrr_at[&20]);
        }
    }
}
