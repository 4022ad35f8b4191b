//! Temperature-scaled InfoNCE over cosine similarity with in-batch negatives.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Cosine similarity matrix `S[i][j] = cos(a_i, b_j)`; zero rows give 0.
pub fn cosine_matrix(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape("cosine_matrix", tape.shape(a), tape.shape(b)));
    }
    let an = tape.l2_normalize_rows(a);
    let bn = tape.l2_normalize_rows(b);
    tape.matmul_t(an, bn)
}

fn diagonal_nll(tape: &mut Tape, logits: Var) -> Result<Var> {
    let b = tape.value(logits).rows();
    let ls = tape.log_softmax_rows(logits);
    let diag: Vec<usize> = (0..b).collect();
    let picked = tape.pick_per_row(ls, &diag)?;
    let mean = tape.mean(picked);
    Ok(tape.scale(mean, -1.0))
}

/// `−(1/B) Σ_i log softmax_j(cos(a_i, b_j)/τ)[i]`: index-matched rows are
/// positives, every other row of `b` is a negative.
pub fn info_nce(tape: &mut Tape, a: Var, b: Var, tau: f64) -> Result<Var> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let sim = cosine_matrix(tape, a, b)?;
    let logits = tape.scale(sim, 1.0 / tau);
    diagonal_nll(tape, logits)
}

/// Average of [`info_nce`] in both directions (`a→b` and `b→a`).
pub fn symmetric_info_nce(tape: &mut Tape, a: Var, b: Var, tau: f64) -> Result<Var> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let sim = cosine_matrix(tape, a, b)?;
    let logits = tape.scale(sim, 1.0 / tau);
    let forward = diagonal_nll(tape, logits)?;
    let logits_t = tape.transpose(logits);
    let backward = diagonal_nll(tape, logits_t)?;
    let both = tape.add(forward, backward)?;
    Ok(tape.scale(both, 0.5))
}
