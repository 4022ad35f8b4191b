//! Directed item co-occurrence graph and graph-convolution stacks.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use crate::data::{ItemVocab, Session};
use crate::error::{Error, Result};
use crate::init;
use crate::params::{ParamId, ParamStore};
use crate::sparse::CsrMatrix;
use crate::tape::{Tape, Var};

/// Transition counts between consecutive items of training sessions.
#[derive(Clone, Debug, PartialEq)]
pub struct CoGraph {
    n: usize,
    weights: BTreeMap<(usize, usize), u64>,
    out_degree: Vec<u64>,
}

impl CoGraph {
    /// Adds one unit of weight to `a → b` for every consecutive pair.
    pub fn build(sessions: &[Session], n: usize) -> Result<Self> {
        let mut weights = BTreeMap::new();
        let mut out_degree = vec![0u64; n];
        for s in sessions {
            for w in s.items.windows(2) {
                let (a, b) = (w[0], w[1]);
                if a >= n || b >= n {
                    return Err(Error::invalid(format!("item index out of range for {n} nodes")));
                }
                *weights.entry((a, b)).or_insert(0) += 1;
                out_degree[a] += 1;
            }
        }
        Ok(Self { n, weights, out_degree })
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn weight(&self, from: usize, to: usize) -> u64 {
        self.weights.get(&(from, to)).copied().unwrap_or(0)
    }

    pub fn out_degree(&self, node: usize) -> u64 {
        self.out_degree[node]
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, u64)> + '_ {
        self.weights.iter().map(|(&(a, b), &w)| (a, b, w))
    }

    pub fn n_edges(&self) -> usize {
        self.weights.len()
    }

    /// Row-normalized adjacency `D⁻¹A`. Nodes without out-edges get an
    /// all-zero row unless `self_loops` is set, in which case they keep
    /// their own embedding.
    pub fn propagation(&self, self_loops: bool) -> Arc<CsrMatrix> {
        let mut triplets: Vec<(usize, usize, f64)> = self
            .edges()
            .map(|(a, b, w)| (a, b, w as f64 / self.out_degree[a] as f64))
            .collect();
        if self_loops {
            triplets.extend((0..self.n).filter(|&i| self.out_degree[i] == 0).map(|i| (i, i, 1.0)));
        }
        Arc::new(CsrMatrix::from_triplets(self.n, self.n, &triplets).expect("indices in range"))
    }

    /// `src \t dst \t weight` lines using external item ids.
    pub fn write_tsv(&self, path: &Path, vocab: &ItemVocab) -> Result<()> {
        let mut out = Vec::new();
        for (a, b, w) in self.edges() {
            writeln!(out, "{}\t{}\t{}", vocab.external(a), vocab.external(b), w).expect("vec write");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// `L` square weight matrices for one embedding channel.
#[derive(Clone, Debug)]
pub struct GcnStack {
    pub layers: Vec<ParamId>,
}

impl GcnStack {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, n_layers: usize, rng: &mut impl Rng) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::invalid("graph convolution needs at least one layer"));
        }
        let layers = (0..n_layers)
            .map(|l| store.add(format!("{prefix}.W{l}"), init::xavier(rng, d, d)))
            .collect();
        Ok(Self { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

/// One propagation step: `Norm(D⁻¹A·X·W)` with row-wise L2 normalization.
pub fn gcn_layer(tape: &mut Tape, propagation: &Arc<CsrMatrix>, x: Var, w: Var) -> Result<Var> {
    let (n, d) = tape.value(x).dims2();
    if propagation.rows() != n {
        return Err(Error::shape(
            "gcn_layer",
            &[propagation.rows(), propagation.cols()],
            &[n, d],
        ));
    }
    let msg = tape.spmm(propagation, x)?;
    let h = tape.matmul(msg, w)?;
    Ok(tape.l2_normalize_rows(h))
}

/// Mean of the input and every layer output.
pub fn gcn_forward(
    tape: &mut Tape,
    store: &ParamStore,
    propagation: &Arc<CsrMatrix>,
    x0: Var,
    stack: &GcnStack,
) -> Result<Var> {
    let mut x = x0;
    let mut acc = x0;
    for &id in &stack.layers {
        let w = tape.param(store, id);
        x = gcn_layer(tape, propagation, x, w)?;
        acc = tape.add(acc, x)?;
    }
    Ok(tape.scale(acc, 1.0 / (stack.depth() + 1) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_gradients;
    use crate::rng;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn session(items: &[usize]) -> Session {
        Session {
            id: String::new(),
            items: items.to_vec(),
            start: 0,
        }
    }

    #[test]
    fn counts_consecutive_pairs() {
        let g = CoGraph::build(&[session(&[0, 1]), session(&[0, 1])], 2).unwrap();
        assert_eq!(g.weight(0, 1), 2);
        assert_eq!(g.out_degree(0), 2);
        let g = CoGraph::build(&[session(&[0, 0])], 1).unwrap();
        assert_eq!(g.weight(0, 0), 1);
        let g = CoGraph::build(&[session(&[0, 1, 2])], 3).unwrap();
        let edges: Vec<_> = g.edges().collect();
        assert_eq!(edges, vec![(0, 1, 1), (1, 2, 1)]);
        assert_eq!(g.out_degree(1), 1);
        assert_eq!(g.out_degree(2), 0);
    }

    #[test]
    fn empty_graph_gives_zero_layer() {
        let g = CoGraph::build(&[], 3).unwrap();
        let p = g.propagation(false);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[3, 2], 1.5));
        let w = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let y = gcn_layer(&mut tape, &p, x, w).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_edge_hand_computation() {
        // a=0 → b=1, X(b) = [3,4], W = I
        let g = CoGraph::build(&[session(&[0, 1])], 2).unwrap();
        let p = g.propagation(false);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 1.0], vec![3.0, 4.0]]).unwrap());
        let w = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let y = gcn_layer(&mut tape, &p, x, w).unwrap();
        let y = tape.value(y);
        assert!((y.get(0, 0) - 0.6).abs() < 1e-15 && (y.get(0, 1) - 0.8).abs() < 1e-15);
        assert_eq!(y.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn layer_is_scale_invariant() {
        let g = CoGraph::build(&[session(&[0, 1, 2, 0])], 3).unwrap();
        let p = g.propagation(false);
        let mut tape = Tape::new();
        let base = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 4.0], vec![3.0, 1.0]]).unwrap();
        let x = tape.constant(base.clone());
        let x10 = tape.constant(base.map(|v| 10.0 * v));
        let w = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let y = gcn_layer(&mut tape, &p, x, w).unwrap();
        let y10 = gcn_layer(&mut tape, &p, x10, w).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(tape.value(y10).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn self_loops_only_for_sinks() {
        let g = CoGraph::build(&[session(&[0, 1])], 3).unwrap();
        let p = g.propagation(true).to_dense();
        assert_eq!(p.data(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    fn stack_fixture(layers: usize, seed: u64) -> (ParamStore, GcnStack, ParamId, Arc<CsrMatrix>) {
        let mut rng = rng::stream(seed, "test");
        let mut store = ParamStore::new();
        let stack = GcnStack::new(&mut store, "gcn", 3, layers, &mut rng).unwrap();
        let x0 = store.add("x0", init::uniform(&mut rng, &[3, 3], 1.0));
        // 3-node chain 0 → 1 → 2 plus a back edge so every layer is non-trivial
        let g = CoGraph::build(&[session(&[0, 1, 2]), session(&[2, 1])], 3).unwrap();
        (store, stack, x0, g.propagation(false))
    }

    #[test]
    fn one_layer_averages_input_and_output() {
        let (store, stack, x0, p) = stack_fixture(1, 1);
        let mut tape = Tape::new();
        let x = tape.param(&store, x0);
        let out = gcn_forward(&mut tape, &store, &p, x, &stack).unwrap();
        let w = tape.param(&store, stack.layers[0]);
        let x1 = gcn_layer(&mut tape, &p, x, w).unwrap();
        let (out, x0v, x1v) = (tape.value(out), tape.value(x), tape.value(x1));
        for i in 0..out.numel() {
            assert!((out.data()[i] - (x0v.data()[i] + x1v.data()[i]) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_graph_forward_scales_input() {
        let mut rng = rng::stream(2, "test");
        let mut store = ParamStore::new();
        let stack = GcnStack::new(&mut store, "gcn", 2, 3, &mut rng).unwrap();
        let g = CoGraph::build(&[], 2).unwrap();
        let p = g.propagation(false);
        let mut tape = Tape::new();
        let base = Tensor::from_rows(&[vec![1.0, 2.0], vec![-4.0, 8.0]]).unwrap();
        let x = tape.constant(base.clone());
        let out = gcn_forward(&mut tape, &store, &p, x, &stack).unwrap();
        assert_eq!(tape.value(out), &base.map(|v| v / 4.0));
    }

    /// Dense reference: plain loops over the materialized D⁻¹A.
    fn dense_reference(store: &ParamStore, stack: &GcnStack, x0: &Tensor, p: &CsrMatrix) -> Tensor {
        let a = p.to_dense();
        let n = x0.rows();
        let d = x0.cols();
        let mut layers = vec![x0.clone()];
        for &id in &stack.layers {
            let w = store.value(id);
            let prev = layers.last().unwrap();
            let mut next = Tensor::zeros(&[n, d]);
            for i in 0..n {
                let mut row = vec![0.0; d];
                for j in 0..n {
                    for c in 0..d {
                        for k in 0..d {
                            row[c] += a.get(i, j) * prev.get(j, k) * w.get(k, c);
                        }
                    }
                }
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                for c in 0..d {
                    next.data_mut()[i * d + c] = if norm > 0.0 { row[c] / norm } else { 0.0 };
                }
            }
            layers.push(next);
        }
        let mut out = Tensor::zeros(&[n, d]);
        for l in &layers {
            out.add_assign(l);
        }
        out.map(|v| v / layers.len() as f64)
    }

    #[test]
    fn chain_graph_matches_dense_reference() {
        let (store, stack, x0, p) = stack_fixture(2, 7);
        let mut tape = Tape::new();
        let x = tape.param(&store, x0);
        let out = gcn_forward(&mut tape, &store, &p, x, &stack).unwrap();
        let reference = dense_reference(&store, &stack, store.value(x0), &p);
        for (a, b) in tape.value(out).data().iter().zip(reference.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn forward_gradients_match_finite_differences() {
        let (mut store, stack, x0, p) = stack_fixture(3, 11);
        let mut ids = stack.layers.clone();
        ids.push(x0);
        let weights = init::uniform(&mut rng::stream(1, "w"), &[3, 3], 1.0);
        let report = check_param_gradients(
            &mut store,
            &ids,
            |tape, store| {
                let x = tape.param(store, x0);
                let out = gcn_forward(tape, store, &p, x, &stack)?;
                let w = tape.constant(weights.clone());
                let m = tape.mul(out, w)?;
                Ok(tape.sum(m))
            },
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    proptest! {
        #[test]
        fn build_is_order_independent(seqs in prop::collection::vec(prop::collection::vec(0usize..6, 2..5), 1..8)) {
            let sessions: Vec<Session> = seqs.iter().map(|s| session(s)).collect();
            let mut reversed = sessions.clone();
            reversed.reverse();
            let a = CoGraph::build(&sessions, 6).unwrap();
            let b = CoGraph::build(&reversed, 6).unwrap();
            prop_assert_eq!(&a, &b);
            for i in 0..6 {
                let row: u64 = a.edges().filter(|e| e.0 == i).map(|e| e.2).sum();
                prop_assert_eq!(row, a.out_degree(i));
            }
        }

        #[test]
        fn layer_rows_have_norm_zero_or_one(seqs in prop::collection::vec(prop::collection::vec(0usize..5, 2..5), 0..6), seed in 0u64..100) {
            let sessions: Vec<Session> = seqs.iter().map(|s| session(s)).collect();
            let g = CoGraph::build(&sessions, 5).unwrap();
            let p = g.propagation(false);
            let mut r = rng::stream(seed, "t");
            let mut tape = Tape::new();
            let x = tape.constant(init::uniform(&mut r, &[5, 4], 1.0));
            let w = tape.constant(init::uniform(&mut r, &[4, 4], 1.0));
            let y = gcn_layer(&mut tape, &p, x, w).unwrap();
            let y = tape.value(y);
            for i in 0..5 {
                let norm = y.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!(norm.abs() < 1e-9 || (norm - 1.0).abs() < 1e-9);
            }
        }
    }
}
