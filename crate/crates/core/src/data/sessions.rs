use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::FeatureMatrix;
use crate::error::{Error, Result};

pub const DEFAULT_MIN_ITEM_COUNT: usize = 5;

/// Bijection between external item ids and dense indices `0..n`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ItemVocab {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl ItemVocab {
    pub fn new() -> Self {
        Self::default()
    }

    /// Index of `id`, inserting it if unseen.
    pub fn intern(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        self.ids.push(id.to_string());
        self.index.insert(id.to_string(), self.ids.len() - 1);
        self.ids.len() - 1
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn external(&self, idx: usize) -> &str {
        &self.ids[idx]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// A session as read from the log, before indexing.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSession {
    pub id: String,
    pub items: Vec<String>,
    pub start: i64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub id: String,
    pub items: Vec<usize>,
    /// Earliest timestamp, used for the temporal split.
    pub start: i64,
}

impl Session {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Input prefix and the item that followed it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingPair {
    pub prefix: Vec<usize>,
    pub target: usize,
    /// Index of the originating session within its split.
    pub session: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitPolicy {
    /// Fraction of sessions, latest by start time, held out for testing.
    pub test_fraction: f64,
}

impl Default for SplitPolicy {
    fn default() -> Self {
        Self { test_fraction: 0.1 }
    }
}

#[derive(Clone, Debug)]
pub struct SessionDataset {
    pub train: Vec<Session>,
    pub test: Vec<Session>,
    pub vocab: ItemVocab,
    pub features: Option<FeatureMatrix>,
    pub split: SplitPolicy,
}

impl SessionDataset {
    /// Temporal holdout: sessions are ordered by start time and the latest
    /// `test_fraction` become the test split.
    pub fn temporal_split(mut sessions: Vec<Session>, vocab: ItemVocab, split: SplitPolicy) -> Result<Self> {
        if sessions.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if !(0.0..1.0).contains(&split.test_fraction) {
            return Err(Error::invalid(format!(
                "test fraction must be in [0, 1), got {}",
                split.test_fraction
            )));
        }
        sessions.sort_by_key(|s| s.start);
        let n = sessions.len();
        let mut n_test = (n as f64 * split.test_fraction).round() as usize;
        if split.test_fraction > 0.0 && n >= 2 {
            n_test = n_test.clamp(1, n - 1);
        }
        let test = sessions.split_off(n - n_test);
        Ok(Self {
            train: sessions,
            test,
            vocab,
            features: None,
            split,
        })
    }

    pub fn n_items(&self) -> usize {
        self.vocab.len()
    }

    /// Prefix-augmented pairs from the training split.
    pub fn train_pairs(&self) -> Vec<TrainingPair> {
        split_last_item(&self.train, true)
    }

    /// Final-item pairs from the test split.
    pub fn test_pairs(&self) -> Vec<TrainingPair> {
        split_last_item(&self.test, false)
    }
}

/// Splits sessions into (prefix, next item) pairs. Without augmentation
/// each session yields only its final item as target; with augmentation
/// every prefix of length ≥ 1 is emitted.
pub fn split_last_item(sessions: &[Session], augment: bool) -> Vec<TrainingPair> {
    let mut pairs = Vec::new();
    for (si, s) in sessions.iter().enumerate() {
        let m = s.items.len();
        if m < 2 {
            continue;
        }
        let first = if augment { 1 } else { m - 1 };
        for end in first..m {
            pairs.push(TrainingPair {
                prefix: s.items[..end].to_vec(),
                target: s.items[end],
                session: si,
            });
        }
    }
    pairs
}

/// Parses `session_id \t item_id \t timestamp` lines into sessions ordered
/// by timestamp (file order breaks ties). Sessions are returned by start
/// time, then by first appearance.
pub fn read_interactions(text: &str) -> Result<Vec<RawSession>> {
    struct Acc {
        first_line: usize,
        events: Vec<(i64, usize, String)>,
    }
    let mut by_id: HashMap<String, Acc> = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(sid), Some(item), Some(ts), None) = (fields.next(), fields.next(), fields.next(), fields.next())
        else {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: "expected 3 tab-separated fields".into(),
            });
        };
        if sid.is_empty() || item.is_empty() {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: "empty session or item id".into(),
            });
        }
        let ts: i64 = ts.trim().parse().map_err(|_| Error::Parse {
            line: lineno + 1,
            msg: format!("timestamp `{ts}` is not an integer"),
        })?;
        by_id
            .entry(sid.to_string())
            .or_insert_with(|| Acc {
                first_line: lineno,
                events: Vec::new(),
            })
            .events
            .push((ts, lineno, item.to_string()));
    }
    let mut sessions: Vec<(usize, RawSession)> = by_id
        .into_iter()
        .map(|(id, mut acc)| {
            acc.events.sort_by_key(|e| (e.0, e.1));
            let start = acc.events[0].0;
            let items = acc.events.into_iter().map(|e| e.2).collect();
            (acc.first_line, RawSession { id, items, start })
        })
        .collect();
    sessions.sort_by_key(|(first, s)| (s.start, *first));
    Ok(sessions.into_iter().map(|(_, s)| s).collect())
}

/// Repeatedly drops items seen fewer than `min_count` times and sessions
/// shorter than 2 until nothing changes.
pub fn filter_sessions(mut sessions: Vec<RawSession>, min_count: usize) -> Vec<RawSession> {
    loop {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in &sessions {
            for it in &s.items {
                *counts.entry(it.as_str()).or_default() += 1;
            }
        }
        let rare: std::collections::HashSet<String> = counts
            .into_iter()
            .filter(|&(_, c)| c < min_count)
            .map(|(k, _)| k.to_string())
            .collect();
        let before = sessions.len();
        let mut changed = !rare.is_empty();
        for s in &mut sessions {
            s.items.retain(|it| !rare.contains(it));
        }
        sessions.retain(|s| s.items.len() >= 2);
        changed |= sessions.len() != before;
        if !changed {
            return sessions;
        }
    }
}

/// Assigns dense indices in order of first appearance.
pub fn index_sessions(raw: Vec<RawSession>) -> (Vec<Session>, ItemVocab) {
    let mut vocab = ItemVocab::new();
    let sessions = raw
        .into_iter()
        .map(|r| Session {
            items: r.items.iter().map(|it| vocab.intern(it)).collect(),
            id: r.id,
            start: r.start,
        })
        .collect();
    (sessions, vocab)
}

/// Reads, filters and indexes a session log.
pub fn load_sessions(path: &Path, min_count: usize) -> Result<(Vec<Session>, ItemVocab)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw = filter_sessions(read_interactions(&text)?, min_count);
    if raw.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(index_sessions(raw))
}

/// Writes sessions back as a log, one line per interaction, with
/// timestamps `start + position`.
pub fn write_sessions(path: &Path, sessions: &[&Session], vocab: &ItemVocab) -> Result<()> {
    let mut out = Vec::new();
    for s in sessions {
        for (pos, &it) in s.items.iter().enumerate() {
            writeln!(out, "{}\t{}\t{}", s.id, vocab.external(it), s.start + pos as i64).expect("vec write");
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
