//! Item embedding tables and attention pooling of sessions.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::init;
use crate::params::{ParamId, ParamStore};
use crate::sparse::CsrMatrix;
use crate::tape::{Tape, Var};

/// `n × d` identifier embeddings drawn from `U(−1/√d, 1/√d)`.
pub fn id_embedding(store: &mut ParamStore, n: usize, d: usize, rng: &mut impl Rng) -> ParamId {
    store.add("E_id", init::uniform(rng, &[n, d], 1.0 / (d as f64).sqrt()))
}

/// Per-channel attention vectors: the weight of item `i` in a session
/// ending with item `m` is `σ(w1·x_m + w2·x_i)`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub w1: ParamId,
    pub w2: ParamId,
}

impl Attention {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        Self {
            w1: store.add(format!("{prefix}.w1"), init::uniform(rng, &[1, d], bound)),
            w2: store.add(format!("{prefix}.w2"), init::uniform(rng, &[1, d], bound)),
        }
    }
}

/// Flattened index layout for encoding several sessions at once.
#[derive(Clone, Debug)]
pub struct SessionBatch {
    flat: Vec<usize>,
    last: Vec<usize>,
    owner: Vec<usize>,
    segments: Arc<CsrMatrix>,
}

impl SessionBatch {
    pub fn new<S: AsRef<[usize]>>(sessions: &[S]) -> Result<Self> {
        let mut flat = Vec::new();
        let mut last = Vec::with_capacity(sessions.len());
        let mut owner = Vec::new();
        for (b, s) in sessions.iter().enumerate() {
            let s = s.as_ref();
            let Some(&m) = s.last() else {
                return Err(Error::invalid("cannot encode an empty session"));
            };
            last.push(m);
            flat.extend_from_slice(s);
            owner.extend(std::iter::repeat_n(b, s.len()));
        }
        let triplets: Vec<(usize, usize, f64)> = owner.iter().enumerate().map(|(i, &b)| (b, i, 1.0)).collect();
        let segments = Arc::new(CsrMatrix::from_triplets(sessions.len(), flat.len(), &triplets)?);
        Ok(Self {
            flat,
            last,
            owner,
            segments,
        })
    }

    pub fn len(&self) -> usize {
        self.last.len()
    }

    pub fn is_empty(&self) -> bool {
        self.last.is_empty()
    }
}

/// Attention-pooled representation of each session in the batch (`B × d`),
/// reading item vectors from the graph-enhanced table `items`.
pub fn encode_sessions(
    tape: &mut Tape,
    store: &ParamStore,
    items: Var,
    batch: &SessionBatch,
    attn: &Attention,
) -> Result<Var> {
    let w1 = tape.param(store, attn.w1);
    let w2 = tape.param(store, attn.w2);
    let x_last = tape.gather(items, &batch.last)?;
    let last_term = tape.matmul_t(x_last, w1)?;
    let last_term = tape.gather(last_term, &batch.owner)?;
    let x = tape.gather(items, &batch.flat)?;
    let self_term = tape.matmul_t(x, w2)?;
    let logits = tape.add(last_term, self_term)?;
    let alpha = tape.sigmoid(logits);
    let weighted = tape.mul(alpha, x)?;
    tape.spmm(&batch.segments, weighted)
}
