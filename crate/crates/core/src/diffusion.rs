//! Noise schedule, forward corruption, conditional x0-predicting denoisers and
//! the deterministic reverse sampler.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::init;
use crate::params::{ParamId, ParamStore};
use crate::retriever::{RetrievedNeighbors, SessionBank};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEPS: usize = 32;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.1;

/// Per-step variances `β_t`, `α_t = 1 − β_t` and cumulative products `ᾱ_t`,
/// all indexed by `t ∈ 1..=T` (index 0 holds `ᾱ_0 = 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear `β` from `beta_min` to `beta_max` over `steps`, truncated at
    /// `beta_max`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("diffusion needs at least one step"));
        }
        if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
            return Err(Error::invalid(format!(
                "noise bounds must satisfy 0 < beta_min < beta_max < 1, got {beta_min} and {beta_max}"
            )));
        }
        let mut betas = vec![0.0];
        for t in 1..=steps {
            let frac = if steps == 1 {
                0.0
            } else {
                (t - 1) as f64 / (steps - 1) as f64
            };
            betas.push((beta_min + frac * (beta_max - beta_min)).min(beta_max));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = vec![1.0];
        for t in 1..=steps {
            alpha_bars.push(alpha_bars[t - 1] * alphas[t]);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `(√ᾱ_t, √(1 − ᾱ_t))`.
    pub fn corruption(&self, t: usize) -> Result<(f64, f64)> {
        self.check_step(t)?;
        let ab = self.alpha_bars[t];
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// Coefficients `(c_pred, c_x)` of one reverse step
    /// `x_{t−1} = c_pred·f(x_t) + c_x·x_t`.
    pub fn posterior(&self, t: usize) -> Result<(f64, f64)> {
        self.check_step(t)?;
        let (ab, ab_prev) = (self.alpha_bars[t], self.alpha_bars[t - 1]);
        let c_pred = ab_prev.sqrt() * self.betas[t] / (1.0 - ab);
        let c_x = self.alphas[t].sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        Ok((c_pred, c_x))
    }
}

/// `x_t = √ᾱ_t·x0 + √(1 − ᾱ_t)·ε` for a single shared timestep.
pub fn q_sample(schedule: &NoiseSchedule, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape("q_sample", x0.shape(), eps.shape()));
    }
    let (a, b) = schedule.corruption(t)?;
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Sinusoidal embedding of a timestep: `sin(t·ω_i)` then `cos(t·ω_i)` for
/// `ω_i = 10000^(−i/h)`, `h = ⌊d/2⌋`; an odd trailing slot is zero.
pub fn timestep_embedding(t: usize, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; d];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

fn timestep_rows(ts: &[usize], d: usize) -> Tensor {
    let data = ts.iter().flat_map(|&t| timestep_embedding(t, d)).collect();
    Tensor::new(vec![ts.len(), d], data).expect("consistent shape")
}

/// Anything that predicts the clean sample from `(x_t, condition, t)`.
pub trait Denoise {
    /// `x_t` and `condition` are `B × d`; `t[b]` is the timestep of row `b`.
    fn denoise(&self, tape: &mut Tape, store: &ParamStore, x_t: Var, condition: Var, t: &[usize]) -> Result<Var>;
}

/// `[x_t ‖ condition ‖ emb(t)]` (3d) → 2d with SiLU → d.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    d: usize,
}

impl Denoiser {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: store.add(format!("{prefix}.W1"), init::xavier(rng, 3 * d, 2 * d)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[1, 2 * d])),
            w2: store.add(format!("{prefix}.W2"), init::xavier(rng, 2 * d, d)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[1, d])),
            d,
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

impl Denoise for Denoiser {
    fn denoise(&self, tape: &mut Tape, store: &ParamStore, x_t: Var, condition: Var, t: &[usize]) -> Result<Var> {
        let b = tape.value(x_t).rows();
        if t.len() != b {
            return Err(Error::invalid(format!("{} timesteps for {b} rows", t.len())));
        }
        let emb = tape.constant(timestep_rows(t, self.d));
        let input = tape.concat(&[x_t, condition, emb])?;
        if tape.value(input).cols() != 3 * self.d {
            return Err(Error::shape("denoiser", tape.shape(input), &[b, 3 * self.d]));
        }
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let h = tape.matmul(input, w1)?;
        let h = tape.add(h, b1)?;
        let h = tape.silu(h);
        let out = tape.matmul(h, w2)?;
        tape.add(out, b2)
    }
}

/// One `(t, ε)` per batch row, shared by every diffusion loss in a step.
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    pub t: Vec<usize>,
    pub eps: Tensor,
}

impl NoiseDraw {
    pub fn sample(schedule: &NoiseSchedule, rows: usize, d: usize, rng: &mut impl Rng) -> Self {
        let t = (0..rows).map(|_| rng.random_range(1..=schedule.steps())).collect();
        let data = (0..rows * d).map(|_| StandardNormal.sample(rng)).collect();
        Self {
            t,
            eps: Tensor::new(vec![rows, d], data).expect("consistent shape"),
        }
    }

    pub fn rows(&self) -> usize {
        self.t.len()
    }

    /// Repeats every row `k` times, matching a `B·k` expanded batch.
    pub fn repeat_rows(&self, k: usize) -> Self {
        let idx: Vec<usize> = (0..self.rows()).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        Self {
            t: idx.iter().map(|&i| self.t[i]).collect(),
            eps: self.eps.select_rows(&idx),
        }
    }
}

/// Forward corruption of every row at its own timestep.
pub fn corrupt(tape: &mut Tape, schedule: &NoiseSchedule, x0: Var, draw: &NoiseDraw) -> Result<Var> {
    if tape.shape(x0) != draw.eps.shape() {
        return Err(Error::shape("corrupt", tape.shape(x0), draw.eps.shape()));
    }
    let mut signal = Vec::with_capacity(draw.rows());
    let mut noise = Vec::with_capacity(draw.rows());
    for &t in &draw.t {
        let (a, b) = schedule.corruption(t)?;
        signal.push(a);
        noise.push(b);
    }
    let a = tape.constant(Tensor::column(signal));
    let scaled_eps = {
        let mut e = draw.eps.clone();
        for (r, b) in noise.iter().enumerate() {
            e.row_mut(r).iter_mut().for_each(|v| *v *= b);
        }
        tape.constant(e)
    };
    let scaled = tape.mul(a, x0)?;
    tape.add(scaled, scaled_eps)
}

/// Per-row squared error `‖x0 − pred‖²` as a `B × 1` column.
fn row_sq_error(tape: &mut Tape, x0: Var, pred: Var) -> Result<Var> {
    let diff = tape.sub(x0, pred)?;
    let sq = tape.mul(diff, diff)?;
    let ones = tape.constant(Tensor::full(&[tape.value(sq).cols(), 1], 1.0));
    tape.matmul(sq, ones)
}

/// Output of [`diffusion_loss`]: the batch-mean loss and the denoiser
/// prediction it was computed from.
pub struct DiffusionTerms {
    pub loss: Var,
    pub prediction: Var,
}

/// Batch mean of `‖x0 − f(x_t, condition, t)‖²`. `x0` is detached, both as
/// the regression target and as the source of `x_t`.
pub fn diffusion_loss(
    tape: &mut Tape,
    store: &ParamStore,
    denoiser: &impl Denoise,
    schedule: &NoiseSchedule,
    x0: Var,
    condition: Var,
    draw: &NoiseDraw,
) -> Result<DiffusionTerms> {
    let x0 = tape.detach(x0);
    let x_t = corrupt(tape, schedule, x0, draw)?;
    let prediction = denoiser.denoise(tape, store, x_t, condition, &draw.t)?;
    let err = row_sq_error(tape, x0, prediction)?;
    let loss = tape.mean(err);
    Ok(DiffusionTerms { loss, prediction })
}

/// `B × k` matrix of diffusion losses, each computed with a single neighbor
/// as the condition and the row's shared noise draw. No gradients are kept.
pub fn per_neighbor_losses(
    store: &ParamStore,
    denoiser: &impl Denoise,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    neighbors: &[RetrievedNeighbors],
    bank: &SessionBank,
    draw: &NoiseDraw,
) -> Result<Tensor> {
    let b = neighbors.len();
    let k = neighbors.first().map_or(0, RetrievedNeighbors::k);
    if x0.rows() != b || draw.rows() != b {
        return Err(Error::invalid("neighbors, targets and draws must share a batch size"));
    }
    let idx: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let rows: Vec<usize> = neighbors.iter().flat_map(|n| n.rows.iter().copied()).collect();
    if rows.len() != b * k {
        return Err(Error::invalid("every query needs the same number of neighbors"));
    }
    let mut tape = Tape::inference();
    let x = tape.constant(x0.select_rows(&idx));
    let cond = tape.constant(bank.reps.select_rows(&rows));
    let expanded = draw.repeat_rows(k);
    let x_t = corrupt(&mut tape, schedule, x, &expanded)?;
    let pred = denoiser.denoise(&mut tape, store, x_t, cond, &expanded.t)?;
    let err = row_sq_error(&mut tape, x, pred)?;
    tape.value(err).clone().reshape(vec![b, k])
}

/// `Σ_j ω_j · s_j` for each query's neighbors, as a `B × d` constant.
pub fn make_condition(neighbors: &[RetrievedNeighbors], bank: &SessionBank) -> Result<Tensor> {
    let d = bank.reps.cols();
    let mut out = Tensor::zeros(&[neighbors.len(), d]);
    for (b, n) in neighbors.iter().enumerate() {
        if n.k() == 0 {
            return Err(Error::invalid("a condition needs at least one neighbor"));
        }
        let row = out.row_mut(b);
        for (&r, &w) in n.rows.iter().zip(&n.weights) {
            for (o, v) in row.iter_mut().zip(bank.reps.row(r)) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}

/// States of a reverse chain, from `x_{T'}` down to `x_0`.
pub struct Trajectory {
    pub states: Vec<Var>,
}

impl Trajectory {
    pub fn output(&self) -> Var {
        *self.states.last().expect("trajectory holds at least the start state")
    }
}

/// Corrupts `start` to step `t_prime` (with `eps`, or noiselessly when `None`)
/// and denoises back to step 0 using posterior means.
#[allow(clippy::too_many_arguments)]
pub fn reverse_generate(
    tape: &mut Tape,
    store: &ParamStore,
    denoiser: &impl Denoise,
    schedule: &NoiseSchedule,
    start: Var,
    condition: Var,
    t_prime: usize,
    eps: Option<&Tensor>,
) -> Result<Trajectory> {
    if t_prime == 0 || t_prime > schedule.steps() {
        return Err(Error::invalid(format!(
            "reverse chain length {t_prime} outside 1..={}",
            schedule.steps()
        )));
    }
    let b = tape.value(start).rows();
    let (a, s) = schedule.corruption(t_prime)?;
    let mut x = tape.scale(start, a);
    if let Some(eps) = eps {
        if eps.shape() != tape.shape(start) {
            return Err(Error::shape("reverse_generate", tape.shape(start), eps.shape()));
        }
        let noise = tape.constant(eps.map(|v| v * s));
        x = tape.add(x, noise)?;
    }
    let mut states = vec![x];
    for t in (1..=t_prime).rev() {
        let pred = denoiser.denoise(tape, store, x, condition, &vec![t; b])?;
        let (c_pred, c_x) = schedule.posterior(t)?;
        let p = tape.scale(pred, c_pred);
        let keep = tape.scale(x, c_x);
        x = tape.add(p, keep)?;
        states.push(x);
    }
    Ok(Trajectory { states })
}
