//! Epoch loop, evaluation and run reports.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Variant};
use crate::data::{Session, SessionDataset, TrainingPair};
use crate::error::{Error, Result};
use crate::metrics::{MetricAccumulator, RankingMetrics, DEFAULT_CUTOFFS};
use crate::model::{Inference, Model, StepLosses};
use crate::optim::Adam;
use crate::retriever::SessionBank;
use crate::rng::{self, Rng};

const EVAL_BATCH: usize = 200;

/// Batch-averaged loss components of one epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub rec: f64,
    pub diffusion: f64,
    pub retrieval: f64,
    pub self_diffusion: f64,
    pub contrastive: f64,
    pub align: f64,
    pub total: f64,
}

impl EpochLosses {
    pub const CSV_HEADER: &'static str = "epoch,rec,diffusion,retrieval,self_diffusion,contrastive,align,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.rec,
            self.diffusion,
            self.retrieval,
            self.self_diffusion,
            self.contrastive,
            self.align,
            self.total
        )
    }

    fn accumulate(&mut self, s: &StepLosses) {
        self.rec += s.rec;
        self.diffusion += s.diffusion;
        self.retrieval += s.retrieval;
        self.self_diffusion += s.self_diffusion;
        self.contrastive += s.contrastive;
        self.align += s.align;
        self.total += s.total;
    }

    fn scale(&mut self, f: f64) {
        for v in [
            &mut self.rec,
            &mut self.diffusion,
            &mut self.retrieval,
            &mut self.self_diffusion,
            &mut self.contrastive,
            &mut self.align,
            &mut self.total,
        ] {
            *v *= f;
        }
    }
}

/// Evaluation output echoed into reports, together with the producing config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: Variant,
    pub seed: u64,
    pub epochs: usize,
    pub p_at: std::collections::BTreeMap<usize, f64>,
    pub mrr_at: std::collections::BTreeMap<usize, f64>,
    pub losses: Vec<EpochLosses>,
    pub config: RunConfig,
}

impl MetricsReport {
    pub fn new(config: &RunConfig, metrics: RankingMetrics, losses: Vec<EpochLosses>) -> Self {
        Self {
            variant: config.variant,
            seed: config.seed,
            epochs: losses.len(),
            p_at: metrics.p_at,
            mrr_at: metrics.mrr_at,
            losses,
            config: config.clone(),
        }
    }
}

/// Number of mini-batches covering `n` pairs.
pub fn batch_count(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

pub struct Trainer {
    pub model: Model,
    adam: Adam,
    shuffle_rng: Rng,
    pool_rng: Rng,
    noise_rng: Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: Model) -> Result<Self> {
        let seed = model.config.seed;
        Ok(Self {
            adam: Adam::new(model.config.lr)?,
            shuffle_rng: rng::stream(seed, "shuffle"),
            pool_rng: rng::stream(seed, "train.pool"),
            noise_rng: rng::stream(seed, "diffusion.noise"),
            model,
            epoch: 0,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// One pass over shuffled training pairs. The neighbor bank is rebuilt
    /// from `train` before the first batch; `pairs[i].session` indexes `train`.
    pub fn train_epoch(&mut self, train: &[Session], pairs: &[TrainingPair]) -> Result<EpochLosses> {
        if pairs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let bank = if self.model.config.variant.uses_retrieval() {
            Some(self.model.session_bank(train, self.epoch)?)
        } else {
            None
        };
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let mut sums = EpochLosses {
            epoch: self.epoch + 1,
            ..EpochLosses::default()
        };
        let batches = batch_count(pairs.len(), self.model.config.batch);
        for chunk in order.chunks(self.model.config.batch) {
            let batch: Vec<(&[usize], usize)> = chunk
                .iter()
                .map(|&i| (pairs[i].prefix.as_slice(), pairs[i].target))
                .collect();
            let exclude: Vec<Option<usize>> = chunk.iter().map(|&i| Some(pairs[i].session)).collect();
            let step = self.model.accumulate_gradients(
                &batch,
                &exclude,
                bank.as_ref(),
                &mut self.pool_rng,
                &mut self.noise_rng,
            )?;
            self.adam.step(&mut self.model.store)?;
            sums.accumulate(&step);
        }
        sums.scale(1.0 / batches as f64);
        self.epoch += 1;
        log::info!("epoch {}: rec {:.4} total {:.4}", sums.epoch, sums.rec, sums.total);
        Ok(sums)
    }
}

/// Trains a fresh model on the dataset for `config.epochs` epochs.
pub fn fit(config: &RunConfig, data: &SessionDataset) -> Result<(Model, Vec<EpochLosses>)> {
    let model = Model::new(config, &data.train, data.n_items(), data.features.as_ref())?;
    let mut trainer = Trainer::new(model)?;
    let pairs = data.train_pairs();
    let mut losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        losses.push(trainer.train_epoch(&data.train, &pairs)?);
    }
    Ok((trainer.model, losses))
}

/// Deterministic inference over test pairs in fixed-size batches.
pub fn infer_all(model: &Model, train: &[Session], pairs: &[TrainingPair]) -> Result<Vec<Inference>> {
    if pairs.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty test set"));
    }
    let bank: Option<SessionBank> = if model.config.variant.uses_retrieval() {
        Some(model.session_bank(train, usize::MAX)?)
    } else {
        None
    };
    let mut pool_rng = rng::stream(model.config.seed, "eval.pool");
    pairs
        .chunks(EVAL_BATCH)
        .map(|chunk| {
            let prefixes: Vec<&[usize]> = chunk.iter().map(|p| p.prefix.as_slice()).collect();
            model.infer(&prefixes, &vec![None; chunk.len()], bank.as_ref(), &mut pool_rng)
        })
        .collect()
}

/// Precision and reciprocal rank at the given cutoffs over test pairs.
pub fn evaluate(model: &Model, train: &[Session], pairs: &[TrainingPair], cutoffs: &[usize]) -> Result<RankingMetrics> {
    let mut acc = MetricAccumulator::new(cutoffs);
    let outputs = infer_all(model, train, pairs)?;
    for (out, chunk) in outputs.iter().zip(pairs.chunks(EVAL_BATCH)) {
        for (r, p) in chunk.iter().enumerate() {
            acc.add(out.scores.row(r), p.target)?;
        }
    }
    acc.finish()
}

/// Trains and evaluates one configuration end to end.
pub fn run(config: &RunConfig, data: &SessionDataset) -> Result<(Model, MetricsReport)> {
    let (model, losses) = fit(config, data)?;
    let metrics = evaluate(&model, &data.train, &data.test_pairs(), &DEFAULT_CUTOFFS)?;
    Ok((model, MetricsReport::new(config, metrics, losses)))
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        1.0
    } else {
        1.0 - dot / (na * nb)
    }
}

/// Mean cosine distances from each test session representation to its
/// generated latent neighbor and to its best retrieved bank neighbor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborDistances {
    pub latent: f64,
    pub retrieved: f64,
}

pub fn neighbor_distances(model: &Model, train: &[Session], pairs: &[TrainingPair]) -> Result<NeighborDistances> {
    if !model.config.variant.uses_retrieval() {
        return Err(Error::invalid("neighbor distances need a retrieval-enabled variant"));
    }
    let bank = model.session_bank(train, usize::MAX)?;
    let outputs = infer_all(model, train, pairs)?;
    let (mut latent, mut retrieved, mut n) = (0.0, 0.0, 0usize);
    for out in &outputs {
        let neighbors = out.neighbors.as_ref().expect("retrieval-enabled inference");
        for (r, nb) in neighbors.iter().enumerate() {
            latent += cosine_distance(out.session.row(r), out.latent.row(r));
            retrieved += cosine_distance(out.session.row(r), bank.reps.row(nb.rows[0]));
            n += 1;
        }
    }
    Ok(NeighborDistances {
        latent: latent / n as f64,
        retrieved: retrieved / n as f64,
    })
}
