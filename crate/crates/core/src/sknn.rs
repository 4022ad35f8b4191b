//! Session k-nearest-neighbors baseline over binary item-incidence vectors.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::metrics::{MetricAccumulator, RankingMetrics};

pub struct Sknn {
    sessions: Vec<BTreeSet<usize>>,
    postings: HashMap<usize, Vec<usize>>,
    n_items: usize,
    k: usize,
}

impl Sknn {
    pub fn new<S: AsRef<[usize]>>(train: &[S], n_items: usize, k: usize) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if k == 0 {
            return Err(Error::invalid("neighborhood size must be positive"));
        }
        let sessions: Vec<BTreeSet<usize>> = train.iter().map(|s| s.as_ref().iter().copied().collect()).collect();
        let mut postings: HashMap<usize, Vec<usize>> = HashMap::new();
        for (i, s) in sessions.iter().enumerate() {
            for &item in s {
                if item >= n_items {
                    return Err(Error::invalid(format!("item {item} outside vocabulary of {n_items}")));
                }
                postings.entry(item).or_default().push(i);
            }
        }
        Ok(Self {
            sessions,
            postings,
            n_items,
            k,
        })
    }

    /// Cosine similarity to every training session sharing an item, as
    /// `(session, similarity)` pairs in session order.
    pub fn similarities(&self, query: &[usize]) -> Vec<(usize, f64)> {
        let q: BTreeSet<usize> = query.iter().copied().collect();
        let mut overlap: HashMap<usize, usize> = HashMap::new();
        for item in &q {
            for &s in self.postings.get(item).into_iter().flatten() {
                *overlap.entry(s).or_insert(0) += 1;
            }
        }
        let mut sims: Vec<(usize, f64)> = overlap
            .into_iter()
            .map(|(s, c)| (s, c as f64 / ((q.len() * self.sessions[s].len()) as f64).sqrt()))
            .collect();
        sims.sort_by_key(|&(s, _)| s);
        sims
    }

    /// Similarity-weighted votes of the `k` nearest sessions. Items in the
    /// query score `−∞`.
    pub fn scores(&self, query: &[usize]) -> Vec<f64> {
        let mut sims = self.similarities(query);
        sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        sims.truncate(self.k);
        let mut scores = vec![0.0; self.n_items];
        for (s, sim) in sims {
            for &item in &self.sessions[s] {
                scores[item] += sim;
            }
        }
        for &item in query {
            scores[item] = f64::NEG_INFINITY;
        }
        scores
    }

    pub fn evaluate<S: AsRef<[usize]>>(&self, cases: &[(S, usize)], cutoffs: &[usize]) -> Result<RankingMetrics> {
        let mut acc = MetricAccumulator::new(cutoffs);
        for (prefix, target) in cases {
            acc.add(&self.scores(prefix.as_ref()), *target)?;
        }
        acc.finish()
    }
}
