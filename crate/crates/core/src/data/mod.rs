//! Session logs, item features and synthetic benchmarks.

mod features;
mod pca;
mod sessions;
mod synth;

pub use features::{align_features, read_features, write_features, FeatureMatrix, RowSource};
pub use pca::{pca_reduce, Pca};
pub use sessions::{
    filter_sessions, index_sessions, load_sessions, read_interactions, split_last_item, write_sessions, ItemVocab,
    RawSession, Session, SessionDataset, SplitPolicy, TrainingPair, DEFAULT_MIN_ITEM_COUNT,
};
pub use synth::{synth_dataset, SynthConfig};

use serde::{Deserialize, Serialize};

/// Dataset summary in the shape of the usual statistics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub items: usize,
    pub interactions: usize,
    pub sessions: usize,
    pub avg_length: f64,
    pub zero_filled_rows: usize,
}

pub fn stats(dataset: &SessionDataset) -> Stats {
    let all = dataset.train.iter().chain(&dataset.test);
    let sessions = dataset.train.len() + dataset.test.len();
    let interactions: usize = all.map(|s| s.items.len()).sum();
    Stats {
        items: dataset.vocab.len(),
        interactions,
        sessions,
        avg_length: if sessions == 0 {
            0.0
        } else {
            interactions as f64 / sessions as f64
        },
        zero_filled_rows: dataset.features.as_ref().map_or(0, FeatureMatrix::zero_filled),
    }
}

/// Loads a session log and, optionally, a feature file aligned to its
/// vocabulary, then applies the temporal split.
pub fn load_dataset(
    sessions: &std::path::Path,
    features: Option<&std::path::Path>,
    min_count: usize,
    split: SplitPolicy,
) -> crate::error::Result<SessionDataset> {
    let (sessions, vocab) = load_sessions(sessions, min_count)?;
    let mut dataset = SessionDataset::temporal_split(sessions, vocab, split)?;
    if let Some(path) = features {
        let (ids, values) = read_features(path)?;
        dataset.features = Some(align_features(&dataset.vocab, &ids, &values));
    }
    Ok(dataset)
}
