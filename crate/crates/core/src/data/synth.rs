//! Planted-cluster session generator.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::data::{FeatureMatrix, ItemVocab, Session, SessionDataset, SplitPolicy};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Standard deviation of per-item feature noise around the cluster centroid.
pub const FEATURE_NOISE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct SynthConfig {
    pub n_clusters: usize,
    pub items_per_cluster: usize,
    pub n_sessions: usize,
    /// Total session length, including the final target item.
    pub session_len: usize,
    pub leak_prob: f64,
    pub seed: u64,
    pub feature_dim: usize,
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_clusters: 8,
            items_per_cluster: 25,
            n_sessions: 2000,
            session_len: 4,
            leak_prob: 0.1,
            seed: 0,
            feature_dim: 100,
            test_fraction: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn n_items(&self) -> usize {
        self.n_clusters * self.items_per_cluster
    }

    /// Planted cluster of an item index.
    pub fn cluster_of(&self, item: usize) -> usize {
        item / self.items_per_cluster
    }
}

/// Each session picks one cluster and draws distinct items from it; every
/// non-final item is independently swapped for a random out-of-cluster item
/// with probability `leak_prob`. The final item always stays in-cluster.
/// Features are the cluster centroid plus Gaussian noise.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SessionDataset> {
    if cfg.n_clusters == 0 || cfg.items_per_cluster == 0 || cfg.n_sessions == 0 || cfg.session_len < 2 {
        return Err(Error::invalid(
            "synthetic dataset needs positive counts and session_len >= 2",
        ));
    }
    if !(0.0..=1.0).contains(&cfg.leak_prob) {
        return Err(Error::invalid(format!(
            "leak_prob must be in [0, 1], got {}",
            cfg.leak_prob
        )));
    }
    let n = cfg.n_items();
    let mut vocab = ItemVocab::new();
    for i in 0..n {
        vocab.intern(&format!("i{i}"));
    }

    let mut rng = rng::stream(cfg.seed, "synth/sessions");
    let mut sessions = Vec::with_capacity(cfg.n_sessions);
    for s in 0..cfg.n_sessions {
        let cluster = rng.random_range(0..cfg.n_clusters);
        let base = cluster * cfg.items_per_cluster;
        let mut items: Vec<usize> = if cfg.session_len <= cfg.items_per_cluster {
            sample(&mut rng, cfg.items_per_cluster, cfg.session_len)
                .into_iter()
                .map(|j| base + j)
                .collect()
        } else {
            (0..cfg.session_len)
                .map(|_| base + rng.random_range(0..cfg.items_per_cluster))
                .collect()
        };
        if cfg.n_clusters > 1 {
            let last = items.len() - 1;
            for it in &mut items[..last] {
                if rng.random_bool(cfg.leak_prob) {
                    let mut other = rng.random_range(0..n - cfg.items_per_cluster);
                    if other >= base {
                        other += cfg.items_per_cluster;
                    }
                    *it = other;
                }
            }
        }
        sessions.push(Session {
            id: format!("s{s}"),
            items,
            start: s as i64 * 100,
        });
    }

    let mut frng = rng::stream(cfg.seed, "synth/features");
    let noise = Normal::new(0.0, FEATURE_NOISE).expect("valid sigma");
    let centroids: Vec<Vec<f64>> = (0..cfg.n_clusters)
        .map(|_| (0..cfg.feature_dim).map(|_| StandardNormal.sample(&mut frng)).collect())
        .collect();
    let mut feats = Vec::with_capacity(n * cfg.feature_dim);
    for i in 0..n {
        for c in &centroids[cfg.cluster_of(i)] {
            feats.push(c + noise.sample(&mut frng));
        }
    }
    let features = FeatureMatrix::loaded(Tensor::matrix(n, cfg.feature_dim, feats)?);

    let mut ds = SessionDataset::temporal_split(
        sessions,
        vocab,
        SplitPolicy {
            test_fraction: cfg.test_fraction,
        },
    )?;
    ds.features = Some(features);
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::stats;

    fn small(leak: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            n_clusters: 4,
            items_per_cluster: 50,
            n_sessions: 100,
            session_len: 3,
            leak_prob: leak,
            seed,
            feature_dim: 8,
            test_fraction: 0.1,
        }
    }

    #[test]
    fn no_leak_means_single_cluster_sessions() {
        let cfg = small(0.0, 1);
        let ds = synth_dataset(&cfg).unwrap();
        for s in ds.train.iter().chain(&ds.test) {
            let c = cfg.cluster_of(s.items[0]);
            assert!(s.items.iter().all(|&i| cfg.cluster_of(i) == c));
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = synth_dataset(&small(0.2, 9)).unwrap();
        let b = synth_dataset(&small(0.2, 9)).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.features, b.features);
        let c = synth_dataset(&small(0.2, 10)).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn counts() {
        let ds = synth_dataset(&small(0.0, 3)).unwrap();
        assert_eq!(ds.n_items(), 200);
        let st = stats(&ds);
        assert_eq!(st.sessions, 100);
        assert_eq!(st.avg_length, 3.0);
        assert_eq!(st.interactions, 300);
        assert_eq!(st.zero_filled_rows, 0);
    }

    #[test]
    fn targets_stay_in_cluster_under_full_leak() {
        let cfg = small(1.0, 4);
        let ds = synth_dataset(&cfg).unwrap();
        for s in &ds.train {
            let target_cluster = cfg.cluster_of(*s.items.last().unwrap());
            assert!(s.items[..s.items.len() - 1]
                .iter()
                .all(|&i| cfg.cluster_of(i) != target_cluster));
        }
    }

    #[test]
    fn rejects_bad_leak() {
        assert!(synth_dataset(&small(1.5, 0)).is_err());
    }
}
