//! The full recommender: graph-enhanced item tables, session encoders,
//! neighbor retrieval, the two conditional generators and the fusion head.

use std::sync::Arc;

use rand::Rng;

use crate::config::{RecLoss, RunConfig};
use crate::contrastive::{info_nce, symmetric_info_nce};
use crate::data::{pca_reduce, FeatureMatrix, Session};
use crate::diffusion::{
    diffusion_loss, make_condition, per_neighbor_losses, reverse_generate, Denoiser, NoiseDraw, NoiseSchedule,
};
use crate::encoder::{encode_sessions, id_embedding, Attention, SessionBatch};
use crate::error::{Error, Result};
use crate::graph::{gcn_forward, CoGraph, GcnStack};
use crate::init;
use crate::params::{ParamId, ParamStore};
use crate::retriever::{feedback_loss, neighbor_weights, retrieve_topk, RetrievedNeighbors, ScoreNet, SessionBank};
use crate::rng;
use crate::sparse::CsrMatrix;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const BANK_CHUNK: usize = 512;

/// Initial modality table: features reduced (or passed through) to `d`
/// columns and rescaled to unit mean row norm. Without features the table is
/// drawn like the identifier table.
pub fn modality_table(features: Option<&FeatureMatrix>, n: usize, d: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let Some(features) = features else {
        log::warn!("no item features supplied; modality table is randomly initialized");
        return Ok(init::uniform(rng, &[n, d], 1.0 / (d as f64).sqrt()));
    };
    if features.values.rows() != n {
        return Err(Error::invalid(format!(
            "feature matrix has {} rows for {n} items",
            features.values.rows()
        )));
    }
    let mut table = match features.dim() {
        f if f > d => pca_reduce(&features.values, d)?.projected,
        f if f == d => features.values.clone(),
        f => {
            return Err(Error::invalid(format!(
                "feature dimension {f} is smaller than embedding dimension {d}"
            )))
        }
    };
    let mean_norm = (0..n)
        .map(|r| table.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / n.max(1) as f64;
    if mean_norm > 0.0 {
        table = table.map(|v| v / mean_norm);
    }
    Ok(table)
}

/// Per-batch loss components, all as plain numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub rec: f64,
    pub diffusion: f64,
    pub retrieval: f64,
    pub self_diffusion: f64,
    pub contrastive: f64,
    pub align: f64,
    pub total: f64,
}

/// Deterministic forward pass results for a batch of query sessions.
#[derive(Clone, Debug)]
pub struct Inference {
    pub scores: Tensor,
    pub session: Tensor,
    pub latent: Tensor,
    pub neighbors: Option<Vec<RetrievedNeighbors>>,
}

#[derive(Clone)]
pub struct Model {
    pub config: RunConfig,
    pub store: ParamStore,
    pub n_items: usize,
    pub e_id: ParamId,
    pub e_mo: ParamId,
    gcn_id: GcnStack,
    gcn_mo: GcnStack,
    attn_id: Attention,
    attn_mo: Attention,
    pub score: ScoreNet,
    pub generator: Denoiser,
    pub self_generator: Denoiser,
    pub rho: ParamId,
    pub schedule: NoiseSchedule,
    propagation: Arc<CsrMatrix>,
}

struct Encoded {
    items: Var,
    session: Var,
    modality: Option<Var>,
}

impl Model {
    /// Builds a freshly initialized model over the training sessions' item
    /// graph. Parameters unused by the configured variant are frozen.
    pub fn new(
        config: &RunConfig,
        train: &[Session],
        n_items: usize,
        features: Option<&FeatureMatrix>,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let graph = CoGraph::build(train, n_items)?;
        let propagation = graph.propagation(config.self_loops);
        let schedule = NoiseSchedule::linear(config.steps, config.beta_min, config.beta_max)?;
        let mut r = rng::stream(config.seed, "init");
        let mut store = ParamStore::new();
        let e_id = id_embedding(&mut store, n_items, d, &mut r);
        let gcn_id = GcnStack::new(&mut store, "gcn_id", d, config.layers, &mut r)?;
        let attn_id = Attention::new(&mut store, "attn_id", d, &mut r);
        let e_mo = store.add("E_mo", modality_table(features, n_items, d, &mut r)?);
        let gcn_mo = GcnStack::new(&mut store, "gcn_mo", d, config.layers, &mut r)?;
        let attn_mo = Attention::new(&mut store, "attn_mo", d, &mut r);
        let score = ScoreNet::new(&mut store, d, &mut r);
        let generator = Denoiser::new(&mut store, "gen", d, &mut r);
        let self_generator = Denoiser::new(&mut store, "self_gen", d, &mut r);
        let rho = store.add("rho", Tensor::scalar(0.0));

        let mut model = Self {
            config: config.clone(),
            store,
            n_items,
            e_id,
            e_mo,
            gcn_id,
            gcn_mo,
            attn_id,
            attn_mo,
            score,
            generator,
            self_generator,
            rho,
            schedule,
            propagation,
        };
        model.apply_freezing();
        Ok(model)
    }

    fn modality_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.e_mo, self.attn_mo.w1, self.attn_mo.w2];
        ids.extend(&self.gcn_mo.layers);
        ids.extend(self.self_generator.params());
        ids
    }

    fn apply_freezing(&mut self) {
        let v = self.config.variant;
        if !v.uses_modality() {
            for id in self.modality_params() {
                self.store.set_trainable(id, false);
            }
        }
        if !v.trains_retriever() {
            for id in self.score.params() {
                self.store.set_trainable(id, false);
            }
        }
        if self.config.freeze_modality {
            self.store.set_trainable(self.e_mo, false);
        }
    }

    /// `ρ = σ(ρ̂)`, the weight of the encoded session in the fused output.
    pub fn fusion_weight(&self) -> f64 {
        crate::tape::sigmoid(self.store.value(self.rho).item())
    }

    fn encode(&self, tape: &mut Tape, sessions: &[&[usize]], with_modality: bool) -> Result<Encoded> {
        let batch = SessionBatch::new(sessions)?;
        let e_id = tape.param(&self.store, self.e_id);
        let items = gcn_forward(tape, &self.store, &self.propagation, e_id, &self.gcn_id)?;
        let session = encode_sessions(tape, &self.store, items, &batch, &self.attn_id)?;
        let modality = if with_modality {
            let e_mo = tape.param(&self.store, self.e_mo);
            let x_mo = gcn_forward(tape, &self.store, &self.propagation, e_mo, &self.gcn_mo)?;
            Some(encode_sessions(tape, &self.store, x_mo, &batch, &self.attn_mo)?)
        } else {
            None
        };
        Ok(Encoded {
            items,
            session,
            modality,
        })
    }

    /// Encodes every training session (all items) under the current
    /// parameters; bank row `i` is `train[i]`.
    pub fn session_bank(&self, train: &[Session], epoch: usize) -> Result<SessionBank> {
        let d = self.config.dim;
        let mut tape = Tape::inference();
        let e_id = tape.param(&self.store, self.e_id);
        let items = gcn_forward(&mut tape, &self.store, &self.propagation, e_id, &self.gcn_id)?;
        let mut data = Vec::with_capacity(train.len() * d);
        for chunk in train.chunks(BANK_CHUNK) {
            let sessions: Vec<&[usize]> = chunk.iter().map(|s| s.items.as_slice()).collect();
            let batch = SessionBatch::new(&sessions)?;
            let s = encode_sessions(&mut tape, &self.store, items, &batch, &self.attn_id)?;
            data.extend_from_slice(tape.value(s).data());
        }
        SessionBank::new(
            Tensor::new(vec![train.len(), d], data)?,
            (0..train.len()).collect(),
            epoch,
        )
    }

    fn condition(
        &self,
        session: &Tensor,
        exclude: &[Option<usize>],
        bank: Option<&SessionBank>,
        rng: &mut impl Rng,
    ) -> Result<(Tensor, Option<Vec<RetrievedNeighbors>>)> {
        if !self.config.variant.uses_retrieval() {
            return Ok((Tensor::zeros(session.shape()), None));
        }
        let bank = bank.ok_or_else(|| Error::invalid("retrieval needs a session bank"))?;
        let neighbors = retrieve_topk(
            &self.score,
            &self.store,
            session,
            exclude,
            bank,
            self.config.k,
            self.config.pool,
            rng,
        )?;
        Ok((make_condition(&neighbors, bank)?, Some(neighbors)))
    }

    fn fuse_and_score(&self, tape: &mut Tape, session: Var, latent: Var, items: Var) -> Result<Var> {
        let rho_raw = tape.param(&self.store, self.rho);
        let rho = tape.sigmoid(rho_raw);
        let gap = tape.sub(session, latent)?;
        let weighted = tape.mul(rho, gap)?;
        let fused = tape.add(latent, weighted)?;
        tape.matmul_t(fused, items)
    }

    /// Scores every item for each prefix with noiseless corruption in the
    /// reverse chain.
    pub fn infer(
        &self,
        prefixes: &[&[usize]],
        exclude: &[Option<usize>],
        bank: Option<&SessionBank>,
        rng: &mut impl Rng,
    ) -> Result<Inference> {
        let mut tape = Tape::inference();
        let enc = self.encode(&mut tape, prefixes, false)?;
        let session = tape.value(enc.session).clone();
        let (cond, neighbors) = self.condition(&session, exclude, bank, rng)?;
        let cond = tape.constant(cond);
        let traj = reverse_generate(
            &mut tape,
            &self.store,
            &self.generator,
            &self.schedule,
            enc.session,
            cond,
            self.config.t_prime,
            None,
        )?;
        let latent = traj.output();
        let scores = self.fuse_and_score(&mut tape, enc.session, latent, enc.items)?;
        Ok(Inference {
            scores: tape.value(scores).clone(),
            session,
            latent: tape.value(latent).clone(),
            neighbors,
        })
    }

    /// Builds the joint objective for one batch, backpropagates it and leaves
    /// the gradients in the store.
    pub fn accumulate_gradients(
        &mut self,
        pairs: &[(&[usize], usize)],
        exclude: &[Option<usize>],
        bank: Option<&SessionBank>,
        pool_rng: &mut impl Rng,
        noise_rng: &mut impl Rng,
    ) -> Result<StepLosses> {
        let cfg = &self.config;
        let variant = cfg.variant;
        let d = cfg.dim;
        let b = pairs.len();
        let prefixes: Vec<&[usize]> = pairs.iter().map(|p| p.0).collect();
        let targets: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        if targets.iter().any(|&t| t >= self.n_items) {
            return Err(Error::invalid("target item outside the vocabulary"));
        }

        let mut tape = Tape::new();
        let enc = self.encode(&mut tape, &prefixes, variant.uses_modality())?;
        let session_value = tape.value(enc.session).clone();
        let (cond, neighbors) = self.condition(&session_value, exclude, bank, pool_rng)?;
        let draw = NoiseDraw::sample(&self.schedule, b, d, noise_rng);
        let chain_eps = NoiseDraw::sample(&self.schedule, b, d, noise_rng).eps;
        let mut losses = StepLosses::default();

        let mut aux = Vec::new();
        if let (Some(neighbors), true) = (&neighbors, variant.trains_retriever()) {
            let bank = bank.expect("retrieval produced neighbors");
            let per_neighbor = per_neighbor_losses(
                &self.store,
                &self.generator,
                &self.schedule,
                &session_value,
                neighbors,
                bank,
                &draw,
            )?;
            let query = tape.constant(session_value.clone());
            let weights = neighbor_weights(&mut tape, &self.store, &self.score, query, neighbors, bank)?;
            let l_r = feedback_loss(&mut tape, weights, &per_neighbor)?;
            losses.retrieval = tape.value(l_r).item();
            aux.push((l_r, cfg.gamma));
        }

        let cond = tape.constant(cond);
        let generated = diffusion_loss(
            &mut tape,
            &self.store,
            &self.generator,
            &self.schedule,
            enc.session,
            cond,
            &draw,
        )?;
        losses.diffusion = tape.value(generated.loss).item();
        aux.push((generated.loss, cfg.gamma));

        if let Some(modality) = enc.modality {
            let own = diffusion_loss(
                &mut tape,
                &self.store,
                &self.self_generator,
                &self.schedule,
                enc.session,
                modality,
                &draw,
            )?;
            losses.self_diffusion = tape.value(own.loss).item();
            aux.push((own.loss, cfg.gamma));
            let l_m = info_nce(&mut tape, generated.prediction, own.prediction, cfg.tau)?;
            losses.contrastive = tape.value(l_m).item();
            aux.push((l_m, cfg.delta));
            let l_align = symmetric_info_nce(&mut tape, enc.session, modality, cfg.tau)?;
            losses.align = tape.value(l_align).item();
            aux.push((l_align, cfg.align_weight));
        }

        let traj = reverse_generate(
            &mut tape,
            &self.store,
            &self.generator,
            &self.schedule,
            enc.session,
            cond,
            cfg.t_prime,
            Some(&chain_eps),
        )?;
        let scores = self.fuse_and_score(&mut tape, enc.session, traj.output(), enc.items)?;
        let l_e = rec_loss(&mut tape, scores, &targets, cfg.rec_loss)?;
        losses.rec = tape.value(l_e).item();

        let mut total = l_e;
        for (term, weight) in aux {
            let scaled = tape.scale(term, weight);
            total = tape.add(total, scaled)?;
        }
        losses.total = tape.value(total).item();
        if !losses.total.is_finite() {
            return Err(Error::invalid("training loss is not finite"));
        }
        tape.backward(total, &mut self.store)?;
        Ok(losses)
    }

    /// Identifier and modality tables by name, for export.
    pub fn embeddings(&self) -> [(&'static str, &Tensor); 2] {
        [
            ("E_id", self.store.value(self.e_id)),
            ("E_mo", self.store.value(self.e_mo)),
        ]
    }
}

/// Next-item objective averaged over the batch.
pub fn rec_loss(tape: &mut Tape, scores: Var, targets: &[usize], mode: RecLoss) -> Result<Var> {
    let (b, n) = tape.value(scores).dims2();
    if targets.len() != b {
        return Err(Error::invalid(format!("{} targets for {b} score rows", targets.len())));
    }
    match mode {
        RecLoss::Softmax => {
            let log_p = tape.log_softmax_rows(scores);
            let picked = tape.pick_per_row(log_p, targets)?;
            let mean = tape.mean(picked);
            Ok(tape.scale(mean, -1.0))
        }
        RecLoss::Binary => {
            let mut onehot = Tensor::zeros(&[b, n]);
            for (r, &t) in targets.iter().enumerate() {
                onehot.row_mut(r)[t] = 1.0;
            }
            let not_y = tape.constant(onehot.map(|v| 1.0 - v));
            let y = tape.constant(onehot);
            let p = tape.softmax_rows(scores);
            let log_p = tape.log(p);
            let q = tape.affine(p, -1.0, 1.0);
            let log_q = tape.log(q);
            let pos = tape.mul(y, log_p)?;
            let neg = tape.mul(not_y, log_q)?;
            let both = tape.add(pos, neg)?;
            let total = tape.sum(both);
            Ok(tape.scale(total, -1.0 / b as f64))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::data::{synth_dataset, SynthConfig};
    use crate::gradcheck::{check_gradients, relative_error};
    use crate::tape::log_sum_exp;

    fn small_config(variant: Variant) -> RunConfig {
        RunConfig {
            dim: 6,
            layers: 2,
            steps: 8,
            t_prime: 3,
            pool: 16,
            batch: 8,
            variant,
            ..RunConfig::default()
        }
    }

    fn small_data() -> crate::data::SessionDataset {
        synth_dataset(&SynthConfig {
            n_clusters: 3,
            items_per_cluster: 6,
            n_sessions: 60,
            feature_dim: 8,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn build(variant: Variant) -> (Model, crate::data::SessionDataset) {
        let data = small_data();
        let model = Model::new(
            &small_config(variant),
            &data.train,
            data.n_items(),
            data.features.as_ref(),
        )
        .unwrap();
        (model, data)
    }

    #[test]
    fn softmax_loss_examples() {
        let mut tape = Tape::inference();
        let s = tape.constant(Tensor::zeros(&[1, 7]));
        let l = rec_loss(&mut tape, s, &[3], RecLoss::Softmax).unwrap();
        assert!((tape.value(l).item() - 7f64.ln()).abs() < 1e-12);

        let s = tape.constant(Tensor::row_vector(vec![1.0, 2.0, 3.0]));
        let l = rec_loss(&mut tape, s, &[2], RecLoss::Softmax).unwrap();
        let want = log_sum_exp(&[1.0, 2.0, 3.0]) - 3.0;
        assert!((tape.value(l).item() - want).abs() < 1e-12);

        let s = tape.constant(Tensor::row_vector(vec![0.0, 800.0, 0.0]));
        let l = rec_loss(&mut tape, s, &[1], RecLoss::Softmax).unwrap();
        assert!(tape.value(l).item() < 1e-12);
    }

    #[test]
    fn binary_loss_matches_direct_sum() {
        let scores = [0.3, -1.0, 2.0, 0.5];
        let mut tape = Tape::inference();
        let s = tape.constant(Tensor::row_vector(scores.to_vec()));
        let l = rec_loss(&mut tape, s, &[2], RecLoss::Binary).unwrap();
        let z = log_sum_exp(&scores);
        let want: f64 = scores
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let p = (v - z).exp();
                if i == 2 {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum();
        assert!((tape.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn rec_loss_gradients() {
        for mode in [RecLoss::Softmax, RecLoss::Binary] {
            let s = Tensor::from_rows(&[vec![0.3, -1.0, 2.0], vec![0.0, 0.5, -0.2]]).unwrap();
            let rep = check_gradients(&[s], |t, v| rec_loss(t, v[0], &[1, 2], mode), 1e-5).unwrap();
            assert!(rep.max_rel_error < 1e-4, "{rep:?}");
        }
    }

    #[test]
    fn modality_table_scaling_and_errors() {
        let values = Tensor::from_rows(&[vec![3.0, 4.0], vec![0.0, 1.0]]).unwrap();
        let f = FeatureMatrix::loaded(values);
        let mut r = rng::stream(0, "t");
        let t = modality_table(Some(&f), 2, 2, &mut r).unwrap();
        assert_eq!(t.data(), &[1.0, 4.0 / 3.0, 0.0, 1.0 / 3.0]);
        assert!(modality_table(Some(&f), 2, 3, &mut r).is_err());
        assert_eq!(modality_table(Some(&f), 2, 1, &mut r).unwrap().shape(), &[2, 1]);
        assert_eq!(modality_table(None, 4, 3, &mut r).unwrap().shape(), &[4, 3]);
    }

    #[test]
    fn fusion_examples() {
        let (mut model, _) = build(Variant::Full);
        let d = model.config.dim;
        let mut r = rng::stream(1, "t");
        let s_id = init::uniform(&mut r, &[2, d], 1.0);
        let latent = init::uniform(&mut r, &[2, d], 1.0);
        let items = init::uniform(&mut r, &[5, d], 1.0);
        let run = |model: &Model, a: &Tensor, b: &Tensor| {
            let mut tape = Tape::inference();
            let (a, b, x) = (
                tape.constant(a.clone()),
                tape.constant(b.clone()),
                tape.constant(items.clone()),
            );
            let s = model.fuse_and_score(&mut tape, a, b, x).unwrap();
            tape.value(s).clone()
        };
        assert_eq!(model.fusion_weight(), 0.5);
        let same = run(&model, &s_id, &s_id);
        let plain = s_id.matmul(&items.transpose()).unwrap();
        for (a, b) in same.data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        model.store.get_mut(model.rho).value = Tensor::scalar(0.7);
        let rho = crate::tape::sigmoid(0.7);
        let got = run(&model, &s_id, &latent);
        for bi in 0..2 {
            for i in 0..5 {
                let want: f64 = (0..d)
                    .map(|c| (rho * s_id.get(bi, c) + (1.0 - rho) * latent.get(bi, c)) * items.get(i, c))
                    .sum();
                assert!((got.get(bi, i) - want).abs() < 1e-12);
            }
        }
        model.store.get_mut(model.rho).value = Tensor::scalar(60.0);
        let limit = run(&model, &s_id, &latent);
        for (a, b) in limit.data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn variants_freeze_unused_parameters() {
        let frozen = |m: &Model, id: ParamId| !m.store.get(id).trainable;
        let (m, _) = build(Variant::NoRad);
        assert!(frozen(&m, m.score.w1) && frozen(&m, m.e_mo) && frozen(&m, m.self_generator.w1));
        let (m, _) = build(Variant::NoFdrq);
        assert!(frozen(&m, m.score.w1) && !frozen(&m, m.e_mo));
        let (m, _) = build(Variant::NoSad);
        assert!(!frozen(&m, m.score.w1) && frozen(&m, m.e_mo));
        let (m, _) = build(Variant::Full);
        assert!(m.store.iter().all(|p| p.trainable));
    }

    fn batch(data: &crate::data::SessionDataset, n: usize) -> (Vec<(Vec<usize>, usize)>, Vec<Option<usize>>) {
        let pairs: Vec<_> = data.train_pairs().into_iter().take(n).collect();
        let exclude = pairs.iter().map(|p| Some(p.session)).collect();
        (pairs.into_iter().map(|p| (p.prefix, p.target)).collect(), exclude)
    }

    #[test]
    fn every_variant_produces_gradients_for_trainable_parameters() {
        for v in Variant::ALL {
            let (mut model, data) = build(v);
            let bank = model.session_bank(&data.train, 0).unwrap();
            let (pairs, exclude) = batch(&data, 6);
            let refs: Vec<(&[usize], usize)> = pairs.iter().map(|(p, t)| (p.as_slice(), *t)).collect();
            let (mut a, mut b) = (rng::stream(0, "pool"), rng::stream(0, "noise"));
            let losses = model
                .accumulate_gradients(&refs, &exclude, Some(&bank), &mut a, &mut b)
                .unwrap();
            assert!(losses.total.is_finite());
            for p in model.store.iter() {
                assert_eq!(p.trainable, p.grad.is_some(), "{v}: {}", p.name);
            }
            if v == Variant::NoRad {
                assert_eq!(
                    (losses.retrieval, losses.self_diffusion, losses.contrastive),
                    (0.0, 0.0, 0.0)
                );
            }
            if v == Variant::NoSad {
                assert_eq!(losses.self_diffusion, 0.0);
                assert!(losses.retrieval > 0.0);
            }
        }
    }

    #[test]
    fn total_is_weighted_sum_of_components() {
        let (mut model, data) = build(Variant::Full);
        let bank = model.session_bank(&data.train, 0).unwrap();
        let (pairs, exclude) = batch(&data, 5);
        let refs: Vec<(&[usize], usize)> = pairs.iter().map(|(p, t)| (p.as_slice(), *t)).collect();
        let (mut a, mut b) = (rng::stream(0, "pool"), rng::stream(0, "noise"));
        let l = model
            .accumulate_gradients(&refs, &exclude, Some(&bank), &mut a, &mut b)
            .unwrap();
        let cfg = &model.config;
        let want = l.rec
            + cfg.gamma * (l.retrieval + l.diffusion + l.self_diffusion)
            + cfg.delta * l.contrastive
            + cfg.align_weight * l.align;
        assert!((l.total - want).abs() < 1e-12);
    }

    fn joint_loss(model: &mut Model, refs: &[(&[usize], usize)], exclude: &[Option<usize>], bank: &SessionBank) -> f64 {
        let (mut a, mut b) = (rng::stream(0, "pool"), rng::stream(0, "noise"));
        let l = model
            .accumulate_gradients(refs, exclude, Some(bank), &mut a, &mut b)
            .unwrap();
        model.store.zero_grad();
        l.total
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        // zero auxiliary weights leave only paths without stop-gradients
        let data = small_data();
        let cfg = RunConfig {
            dim: 3,
            layers: 2,
            steps: 4,
            t_prime: 3,
            gamma: 0.0,
            delta: 0.0,
            align_weight: 0.0,
            variant: Variant::NoRad,
            ..RunConfig::default()
        };
        let mut model = Model::new(&cfg, &data.train, data.n_items(), data.features.as_ref()).unwrap();
        model.store.get_mut(model.rho).value = Tensor::scalar(0.4);
        let bank = model.session_bank(&data.train, 0).unwrap();
        let (pairs, exclude) = batch(&data, 4);
        let refs: Vec<(&[usize], usize)> = pairs.iter().map(|(p, t)| (p.as_slice(), *t)).collect();
        let (mut a, mut b) = (rng::stream(0, "pool"), rng::stream(0, "noise"));
        model
            .accumulate_gradients(&refs, &exclude, Some(&bank), &mut a, &mut b)
            .unwrap();
        let analytic: Vec<(ParamId, Tensor)> = model
            .store
            .ids()
            .filter(|&id| model.store.get(id).trainable)
            .map(|id| (id, model.store.grad(id).unwrap().clone()))
            .collect();
        model.store.zero_grad();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (id, grad) in analytic {
            for i in 0..grad.numel() {
                let orig = model.store.value(id).data()[i];
                model.store.get_mut(id).value.data_mut()[i] = orig + h;
                let plus = joint_loss(&mut model, &refs, &exclude, &bank);
                model.store.get_mut(id).value.data_mut()[i] = orig - h;
                let minus = joint_loss(&mut model, &refs, &exclude, &bank);
                model.store.get_mut(id).value.data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                worst = worst.max(relative_error(grad.data()[i], numeric));
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn fusion_weight_gradient_in_full_model() {
        let (mut model, data) = build(Variant::Full);
        let bank = model.session_bank(&data.train, 0).unwrap();
        let (pairs, exclude) = batch(&data, 5);
        let refs: Vec<(&[usize], usize)> = pairs.iter().map(|(p, t)| (p.as_slice(), *t)).collect();
        let (mut a, mut b) = (rng::stream(0, "pool"), rng::stream(0, "noise"));
        model
            .accumulate_gradients(&refs, &exclude, Some(&bank), &mut a, &mut b)
            .unwrap();
        let analytic = model.store.grad(model.rho).unwrap().item();
        model.store.zero_grad();
        let h = 1e-5;
        model.store.get_mut(model.rho).value = Tensor::scalar(h);
        let plus = joint_loss(&mut model, &refs, &exclude, &bank);
        model.store.get_mut(model.rho).value = Tensor::scalar(-h);
        let minus = joint_loss(&mut model, &refs, &exclude, &bank);
        assert!(relative_error(analytic, (plus - minus) / (2.0 * h)) < 1e-4);
    }
}
