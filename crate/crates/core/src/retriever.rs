//! Learned neighbor retrieval over a bank of encoded training sessions.

use std::cmp::Ordering;

use rand::Rng;

use crate::error::{Error, Result};
use crate::init;
use crate::params::{ParamId, ParamStore};
use crate::tape::{self, Tape, Var};
use crate::tensor::Tensor;

/// Two-layer scorer over a concatenated `[query ‖ candidate]` pair:
/// `2d → d` with SiLU, then `d → 1`.
#[derive(Clone, Debug)]
pub struct ScoreNet {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    d: usize,
}

fn silu(x: f64) -> f64 {
    x * tape::sigmoid(x)
}

impl ScoreNet {
    pub fn new(store: &mut ParamStore, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: store.add("score.W1", init::xavier(rng, 2 * d, d)),
            b1: store.add("score.b1", Tensor::zeros(&[1, d])),
            w2: store.add("score.W2", init::xavier(rng, d, 1)),
            b2: store.add("score.b2", Tensor::zeros(&[1, 1])),
            d,
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    /// Scores each row of an `N × 2d` pair matrix, giving `N × 1`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, pairs: Var) -> Result<Var> {
        if tape.value(pairs).cols() != 2 * self.d {
            return Err(Error::shape("score_net", tape.shape(pairs), &[0, 2 * self.d]));
        }
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let h = tape.matmul(pairs, w1)?;
        let h = tape.add(h, b1)?;
        let h = tape.silu(h);
        let out = tape.matmul(h, w2)?;
        tape.add(out, b2)
    }

    /// Direct evaluation of a single pair without a tape.
    pub fn score_pair(&self, store: &ParamStore, query: &[f64], candidate: &[f64]) -> Result<f64> {
        if query.len() != self.d || candidate.len() != self.d {
            return Err(Error::shape("score_pair", &[query.len()], &[candidate.len()]));
        }
        let q = self.project_queries(store, &Tensor::row_vector(query.to_vec()))?;
        let c = self.project_bank(store, &Tensor::row_vector(candidate.to_vec()))?;
        Ok(self.score_projected(store, q.row(0), c.row(0)))
    }

    /// Query half of the first layer plus its bias: `Q·W1[..d] + b1`.
    fn project_queries(&self, store: &ParamStore, queries: &Tensor) -> Result<Tensor> {
        let w1 = store.value(self.w1);
        let top = Tensor::matrix(self.d, self.d, w1.data()[..self.d * self.d].to_vec())?;
        let mut q = queries.matmul(&top)?;
        let b1 = store.value(self.b1).data();
        for r in 0..q.rows() {
            for (v, b) in q.row_mut(r).iter_mut().zip(b1) {
                *v += b;
            }
        }
        Ok(q)
    }

    /// Candidate half of the first layer: `C·W1[d..]`.
    fn project_bank(&self, store: &ParamStore, bank: &Tensor) -> Result<Tensor> {
        let w1 = store.value(self.w1);
        let bottom = Tensor::matrix(self.d, self.d, w1.data()[self.d * self.d..].to_vec())?;
        bank.matmul(&bottom)
    }

    fn score_projected(&self, store: &ParamStore, q: &[f64], c: &[f64]) -> f64 {
        let w2 = store.value(self.w2).data();
        let b2 = store.value(self.b2).item();
        q.iter().zip(c).zip(w2).map(|((a, b), w)| silu(a + b) * w).sum::<f64>() + b2
    }
}

/// Snapshot of encoded training sessions; row `i` belongs to `sessions[i]`.
#[derive(Clone, Debug)]
pub struct SessionBank {
    pub reps: Tensor,
    pub sessions: Vec<usize>,
    pub epoch: usize,
}

impl SessionBank {
    pub fn new(reps: Tensor, sessions: Vec<usize>, epoch: usize) -> Result<Self> {
        if reps.rows() != sessions.len() {
            return Err(Error::invalid(format!(
                "bank has {} rows but {} session ids",
                reps.rows(),
                sessions.len()
            )));
        }
        Ok(Self { reps, sessions, epoch })
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    /// Bank row holding the given source session, if any.
    pub fn row_of(&self, session: usize) -> Option<usize> {
        self.sessions.iter().position(|&s| s == session)
    }
}

/// Top-k bank rows for one query, in descending score order.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievedNeighbors {
    pub rows: Vec<usize>,
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
}

impl RetrievedNeighbors {
    /// Selects the `k` best `(row, score)` candidates; equal scores prefer the
    /// lower row index. Weights are a softmax over the selected scores.
    pub fn from_candidates(mut candidates: Vec<(usize, f64)>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if candidates.len() < k {
            return Err(Error::invalid(format!(
                "only {} candidates available for k = {k}",
                candidates.len()
            )));
        }
        candidates.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
        candidates.truncate(k);
        let rows: Vec<usize> = candidates.iter().map(|c| c.0).collect();
        let scores: Vec<f64> = candidates.iter().map(|c| c.1).collect();
        let weights = tape::softmax_rows(&Tensor::row_vector(scores.clone())).into_data();
        Ok(Self { rows, scores, weights })
    }

    pub fn k(&self) -> usize {
        self.rows.len()
    }
}

/// Retrieves neighbors for every query row. `exclude[b]` names a bank row the
/// query may not select (its own session). When more than `pool` rows remain
/// eligible, a uniform sample of `pool` rows is scored instead of all of them.
#[allow(clippy::too_many_arguments)]
pub fn retrieve_topk(
    net: &ScoreNet,
    store: &ParamStore,
    queries: &Tensor,
    exclude: &[Option<usize>],
    bank: &SessionBank,
    k: usize,
    pool: usize,
    rng: &mut impl Rng,
) -> Result<Vec<RetrievedNeighbors>> {
    if exclude.len() != queries.rows() {
        return Err(Error::invalid("one exclusion entry is required per query"));
    }
    if pool < k {
        return Err(Error::invalid(format!("pool size {pool} is smaller than k = {k}")));
    }
    let q = net.project_queries(store, queries)?;
    let projected = net.project_bank(store, &bank.reps)?;
    let n = bank.len();
    let mut out = Vec::with_capacity(queries.rows());
    for (b, skip) in exclude.iter().enumerate() {
        let eligible = n - usize::from(skip.is_some_and(|s| s < n));
        if eligible < k {
            return Err(Error::invalid(format!(
                "bank has {eligible} eligible rows, fewer than k = {k}"
            )));
        }
        let rows: Vec<usize> = if eligible <= pool {
            (0..n).filter(|&r| Some(r) != *skip).collect()
        } else {
            let mut picked: Vec<usize> = rand::seq::index::sample(rng, eligible, pool)
                .into_iter()
                .map(|i| match skip {
                    Some(s) if i >= *s => i + 1,
                    _ => i,
                })
                .collect();
            picked.sort_unstable();
            picked
        };
        let candidates = rows
            .into_iter()
            .map(|r| (r, net.score_projected(store, q.row(b), projected.row(r))))
            .collect();
        out.push(RetrievedNeighbors::from_candidates(candidates, k)?);
    }
    Ok(out)
}

/// Differentiable `B × k` softmax weights of the retrieved neighbors, scored
/// against `queries` (`B × d`). Neighbor rows enter as constants.
pub fn neighbor_weights(
    tape: &mut Tape,
    store: &ParamStore,
    net: &ScoreNet,
    queries: Var,
    neighbors: &[RetrievedNeighbors],
    bank: &SessionBank,
) -> Result<Var> {
    let b = neighbors.len();
    let k = neighbors.first().map_or(0, RetrievedNeighbors::k);
    if neighbors.iter().any(|n| n.k() != k) || k == 0 {
        return Err(Error::invalid("every query needs the same nonzero number of neighbors"));
    }
    let repeat: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let rows: Vec<usize> = neighbors.iter().flat_map(|n| n.rows.iter().copied()).collect();
    let q = tape.gather(queries, &repeat)?;
    let c = tape.constant(bank.reps.select_rows(&rows));
    let pairs = tape.concat(&[q, c])?;
    let scores = net.forward(tape, store, pairs)?;
    let scores = tape.reshape(scores, &[b, k])?;
    Ok(tape.softmax_rows(scores))
}

/// Batch mean of `Σ_j ω_j · L_j`, with the per-neighbor losses held constant.
pub fn feedback_loss(tape: &mut Tape, weights: Var, losses: &Tensor) -> Result<Var> {
    if tape.shape(weights) != losses.shape() {
        return Err(Error::shape("feedback_loss", tape.shape(weights), losses.shape()));
    }
    let b = losses.rows().max(1);
    let l = tape.constant(losses.clone());
    let prod = tape.mul(weights, l)?;
    let total = tape.sum(prod);
    Ok(tape.scale(total, 1.0 / b as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, check_param_gradients};
    use crate::rng;
    use proptest::prelude::*;

    fn net(d: usize, seed: u64) -> (ParamStore, ScoreNet) {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, "t");
        let net = ScoreNet::new(&mut store, d, &mut r);
        store.get_mut(net.b1).value = init::uniform(&mut r, &[1, d], 0.5);
        store.get_mut(net.b2).value = init::uniform(&mut r, &[1, 1], 0.5);
        (store, net)
    }

    fn hand_score(store: &ParamStore, net: &ScoreNet, q: &[f64], c: &[f64]) -> f64 {
        let d = net.dim();
        let x: Vec<f64> = q.iter().chain(c).copied().collect();
        let (w1, b1, w2, b2) = (
            store.value(net.w1),
            store.value(net.b1),
            store.value(net.w2),
            store.value(net.b2),
        );
        let mut out = b2.item();
        for j in 0..d {
            let mut h = b1.data()[j];
            for (i, xi) in x.iter().enumerate() {
                h += xi * w1.get(i, j);
            }
            out += h / (1.0 + (-h).exp()) * w2.get(j, 0);
        }
        out
    }

    #[test]
    fn zero_net_scores_zero() {
        let (mut store, net) = net(3, 1);
        for id in net.params() {
            let shape = store.value(id).shape().to_vec();
            store.get_mut(id).value = Tensor::zeros(&shape);
        }
        assert_eq!(
            net.score_pair(&store, &[1.0, 2.0, 3.0], &[-1.0, 0.5, 4.0]).unwrap(),
            0.0
        );
    }

    #[test]
    fn score_matches_hand_evaluation() {
        let (store, net) = net(4, 2);
        let q = [0.3, -0.2, 0.9, 0.1];
        let c = [-0.7, 0.4, 0.05, 0.6];
        let fast = net.score_pair(&store, &q, &c).unwrap();
        assert!((fast - hand_score(&store, &net, &q, &c)).abs() < 1e-12);
        let mut tape = Tape::inference();
        let pairs = tape.constant(Tensor::row_vector(q.iter().chain(&c).copied().collect()));
        let out = net.forward(&mut tape, &store, pairs).unwrap();
        assert!((tape.value(out).item() - fast).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let (store, net) = net(3, 3);
        let mut tape = Tape::inference();
        let pairs = tape.constant(Tensor::zeros(&[2, 5]));
        assert!(net.forward(&mut tape, &store, pairs).is_err());
    }

    #[test]
    fn softmax_weights_of_known_scores() {
        let n = RetrievedNeighbors::from_candidates(vec![(0, 0.0), (1, 2f64.ln())], 2).unwrap();
        assert_eq!(n.rows, vec![1, 0]);
        assert!((n.weights[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((n.weights[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn equal_scores_give_uniform_weights_and_lowest_rows() {
        let n = RetrievedNeighbors::from_candidates((0..6).rev().map(|r| (r, 1.5)).collect(), 3).unwrap();
        assert_eq!(n.rows, vec![0, 1, 2]);
        for w in n.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn too_small_bank_is_an_error() {
        let (store, net) = net(2, 4);
        let bank = SessionBank::new(Tensor::zeros(&[2, 2]), vec![0, 1], 0).unwrap();
        let q = Tensor::zeros(&[1, 2]);
        let mut r = rng::stream(0, "pool");
        assert!(retrieve_topk(&net, &store, &q, &[Some(0)], &bank, 2, 8, &mut r).is_err());
        assert!(retrieve_topk(&net, &store, &q, &[None], &bank, 2, 8, &mut r).is_ok());
    }

    fn random_bank(n: usize, d: usize, seed: u64) -> SessionBank {
        let mut r = rng::stream(seed, "bank");
        SessionBank::new(init::uniform(&mut r, &[n, d], 1.0), (0..n).collect(), 0).unwrap()
    }

    #[test]
    fn full_bank_matches_sort_oracle() {
        let d = 3;
        let (store, net) = net(d, 5);
        let bank = random_bank(40, d, 6);
        let mut r = rng::stream(1, "q");
        let queries = init::uniform(&mut r, &[5, d], 1.0);
        let exclude: Vec<Option<usize>> = (0..5).map(|b| Some(b * 3)).collect();
        let got = retrieve_topk(&net, &store, &queries, &exclude, &bank, 4, 64, &mut r).unwrap();
        for b in 0..5 {
            let mut all: Vec<(usize, f64)> = (0..40)
                .filter(|&j| j != b * 3)
                .map(|j| (j, hand_score(&store, &net, queries.row(b), bank.reps.row(j))))
                .collect();
            all.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap());
            let want: Vec<usize> = all[..4].iter().map(|x| x.0).collect();
            assert_eq!(got[b].rows, want);
            for (s, w) in got[b].scores.iter().zip(&all[..4]) {
                assert!((s - w.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampled_pool_is_seeded_and_excludes_self() {
        let d = 3;
        let (store, net) = net(d, 7);
        let bank = random_bank(100, d, 8);
        let queries = random_bank(4, d, 9).reps;
        let exclude: Vec<Option<usize>> = (0..4).map(Some).collect();
        let run = |seed| {
            let mut r = rng::stream(seed, "pool");
            retrieve_topk(&net, &store, &queries, &exclude, &bank, 3, 10, &mut r).unwrap()
        };
        let a = run(11);
        assert_eq!(a, run(11));
        for (b, n) in a.iter().enumerate() {
            assert!(!n.rows.contains(&b));
        }
    }

    #[test]
    fn feedback_loss_arithmetic() {
        let mut tape = Tape::inference();
        let w = tape.constant(Tensor::row_vector(vec![0.5, 0.5]));
        let l = feedback_loss(&mut tape, w, &Tensor::row_vector(vec![1.0, 3.0])).unwrap();
        assert_eq!(tape.value(l).item(), 2.0);
    }

    #[test]
    fn feedback_loss_random_case() {
        let mut r = rng::stream(12, "t");
        let raw = init::uniform(&mut r, &[1, 3], 2.0);
        let losses = init::uniform(&mut r, &[1, 3], 2.0).map(f64::abs);
        let mut tape = Tape::inference();
        let s = tape.constant(raw.clone());
        let w = tape.softmax_rows(s);
        let l = feedback_loss(&mut tape, w, &losses).unwrap();
        let z: f64 = raw.data().iter().map(|v| v.exp()).sum();
        let want: f64 = raw.data().iter().zip(losses.data()).map(|(v, l)| v.exp() / z * l).sum();
        assert!((tape.value(l).item() - want).abs() < 1e-12);
    }

    fn score_grads(raw: Tensor, losses: Tensor) -> Tensor {
        let mut tape = Tape::new();
        let s = tape.leaf(raw);
        let w = tape.softmax_rows(s);
        let l = feedback_loss(&mut tape, w, &losses).unwrap();
        let g = tape.backward(l, &mut ParamStore::new()).unwrap();
        g.get(s).unwrap().clone()
    }

    #[test]
    fn equal_losses_give_zero_score_gradient() {
        let g = score_grads(
            Tensor::row_vector(vec![0.3, -1.0, 2.0]),
            Tensor::row_vector(vec![1.7; 3]),
        );
        assert!(g.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn lower_loss_neighbor_gains_weight() {
        let g = score_grads(Tensor::row_vector(vec![0.1, 0.4]), Tensor::row_vector(vec![0.5, 2.0]));
        assert!(g.data()[0] < g.data()[1]);
    }

    #[test]
    fn weights_gradient_reaches_score_net() {
        let d = 3;
        let (mut store, net) = net(d, 13);
        let bank = random_bank(6, d, 14);
        let queries = random_bank(2, d, 15).reps;
        let mut r = rng::stream(0, "pool");
        let neighbors = retrieve_topk(&net, &store, &queries, &[Some(0), Some(1)], &bank, 3, 16, &mut r).unwrap();
        let losses = init::uniform(&mut r, &[2, 3], 1.0);
        let ids = net.params();
        let rep = check_param_gradients(
            &mut store,
            &ids,
            |tape, store| {
                let q = tape.constant(queries.clone());
                let w = neighbor_weights(tape, store, &net, q, &neighbors, &bank)?;
                feedback_loss(tape, w, &losses)
            },
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
        let mut frozen = store.clone();
        for id in ids {
            frozen.set_trainable(id, false);
        }
        let rep = check_gradients(
            std::slice::from_ref(&queries),
            |tape, v| {
                let w = neighbor_weights(tape, &frozen, &net, v[0], &neighbors, &bank)?;
                feedback_loss(tape, w, &losses)
            },
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn trainable_weights_match_retrieval_weights() {
        let d = 4;
        let (store, net) = net(d, 16);
        let bank = random_bank(20, d, 17);
        let queries = random_bank(3, d, 18).reps;
        let mut r = rng::stream(0, "pool");
        let neighbors = retrieve_topk(&net, &store, &queries, &[None; 3], &bank, 2, 64, &mut r).unwrap();
        let mut tape = Tape::inference();
        let q = tape.constant(queries);
        let w = neighbor_weights(&mut tape, &store, &net, q, &neighbors, &bank).unwrap();
        for (b, n) in neighbors.iter().enumerate() {
            for j in 0..2 {
                assert!((tape.value(w).get(b, j) - n.weights[j]).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn weights_are_a_distribution(scores in proptest::collection::vec(-30.0f64..30.0, 1..20), k in 1usize..6) {
            let k = k.min(scores.len());
            let n = RetrievedNeighbors::from_candidates(scores.into_iter().enumerate().collect(), k).unwrap();
            prop_assert!((n.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(n.weights.iter().all(|&w| w > 0.0));
            prop_assert!(n.scores.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn selection_equals_full_sort(scores in proptest::collection::vec(-3i32..3, 1..30), k in 1usize..6) {
            let k = k.min(scores.len());
            let cands: Vec<(usize, f64)> = scores.iter().map(|&s| f64::from(s)).enumerate().collect();
            let n = RetrievedNeighbors::from_candidates(cands.clone(), k).unwrap();
            let mut sorted = cands;
            sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let want: Vec<usize> = sorted[..k].iter().map(|c| c.0).collect();
            prop_assert_eq!(n.rows, want);
        }
    }
}
