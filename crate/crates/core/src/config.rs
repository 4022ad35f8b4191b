//! Run configuration: every hyperparameter with its default, a flat
//! `key = value` text form, and the ablation variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which parts of the model are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    /// Unconditional generator; no retriever, no modality channel.
    #[serde(rename = "no-RAD")]
    NoRad,
    /// Retriever used but not trained from generator feedback.
    #[serde(rename = "no-FDRQ")]
    NoFdrq,
    /// Identifier channel only; no self-conditioned generator.
    #[serde(rename = "no-SAD")]
    NoSad,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoRad, Variant::NoFdrq, Variant::NoSad];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoRad => "no-RAD",
            Variant::NoFdrq => "no-FDRQ",
            Variant::NoSad => "no-SAD",
        }
    }

    pub fn uses_retrieval(self) -> bool {
        self != Variant::NoRad
    }

    pub fn trains_retriever(self) -> bool {
        matches!(self, Variant::Full | Variant::NoSad)
    }

    pub fn uses_modality(self) -> bool {
        matches!(self, Variant::Full | Variant::NoFdrq)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownVariant {
                name: s.to_string(),
                valid: Variant::ALL.map(Variant::name).join(", "),
            })
    }
}

/// Form of the next-item objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecLoss {
    /// Softmax cross-entropy over the whole item vocabulary.
    Softmax,
    /// Summed per-item binary cross-entropy over softmax-normalized scores.
    Binary,
}

impl FromStr for RecLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(RecLoss::Softmax),
            "binary" => Ok(RecLoss::Binary),
            other => Err(Error::invalid(format!(
                "rec-loss must be `softmax` or `binary`, got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for RecLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RecLoss::Softmax => "softmax",
            RecLoss::Binary => "binary",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dim: usize,
    pub layers: usize,
    pub tau: f64,
    pub steps: usize,
    pub t_prime: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub k: usize,
    pub pool: usize,
    pub gamma: f64,
    pub delta: f64,
    pub align_weight: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub variant: Variant,
    pub rec_loss: RecLoss,
    pub freeze_modality: bool,
    pub self_loops: bool,
    pub test_fraction: f64,
    pub min_item_count: usize,
    pub knn: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dim: 100,
            layers: 3,
            tau: 0.3,
            steps: 32,
            t_prime: 16,
            beta_min: 1e-4,
            beta_max: 0.1,
            k: 3,
            pool: 512,
            gamma: 7.0,
            delta: 0.05,
            align_weight: 0.1,
            lr: 0.001,
            batch: 50,
            epochs: 10,
            seed: 0,
            variant: Variant::Full,
            rec_loss: RecLoss::Softmax,
            freeze_modality: false,
            self_loops: false,
            test_fraction: 0.1,
            min_item_count: 5,
            knn: 100,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("cannot parse `{value}` for `{key}`")))
}

impl RunConfig {
    pub const KEYS: [&'static str; 23] = [
        "dim",
        "layers",
        "tau",
        "steps",
        "t-prime",
        "beta-min",
        "beta-max",
        "k",
        "pool",
        "gamma",
        "delta",
        "align-weight",
        "lr",
        "batch",
        "epochs",
        "seed",
        "variant",
        "rec-loss",
        "freeze-modality",
        "self-loops",
        "test-fraction",
        "min-item-count",
        "knn",
    ];

    /// Sets one field from its kebab-case key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "dim" => self.dim = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "t-prime" => self.t_prime = parse(key, v)?,
            "beta-min" => self.beta_min = parse(key, v)?,
            "beta-max" => self.beta_max = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "pool" => self.pool = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "delta" => self.delta = parse(key, v)?,
            "align-weight" => self.align_weight = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "variant" => self.variant = v.parse()?,
            "rec-loss" => self.rec_loss = v.parse()?,
            "freeze-modality" => self.freeze_modality = parse(key, v)?,
            "self-loops" => self.self_loops = parse(key, v)?,
            "test-fraction" => self.test_fraction = parse(key, v)?,
            "min-item-count" => self.min_item_count = parse(key, v)?,
            "knn" => self.knn = parse(key, v)?,
            other => return Err(Error::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Current value of a field, formatted as [`RunConfig::set`] accepts it.
    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "dim" => self.dim.to_string(),
            "layers" => self.layers.to_string(),
            "tau" => self.tau.to_string(),
            "steps" => self.steps.to_string(),
            "t-prime" => self.t_prime.to_string(),
            "beta-min" => self.beta_min.to_string(),
            "beta-max" => self.beta_max.to_string(),
            "k" => self.k.to_string(),
            "pool" => self.pool.to_string(),
            "gamma" => self.gamma.to_string(),
            "delta" => self.delta.to_string(),
            "align-weight" => self.align_weight.to_string(),
            "lr" => self.lr.to_string(),
            "batch" => self.batch.to_string(),
            "epochs" => self.epochs.to_string(),
            "seed" => self.seed.to_string(),
            "variant" => self.variant.to_string(),
            "rec-loss" => self.rec_loss.to_string(),
            "freeze-modality" => self.freeze_modality.to_string(),
            "self-loops" => self.self_loops.to_string(),
            "test-fraction" => self.test_fraction.to_string(),
            "min-item-count" => self.min_item_count.to_string(),
            "knn" => self.knn.to_string(),
            other => return Err(Error::UnknownKey(other.to_string())),
        })
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: n + 1,
                    msg: format!("expected `key = value`, got `{line}`"),
                });
            };
            self.set(key, value).map_err(|e| match e {
                Error::UnknownKey(_) | Error::UnknownVariant { .. } => e,
                other => Error::Parse {
                    line: n + 1,
                    msg: other.to_string(),
                },
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let checks: [(bool, &str); 11] = [
            (self.dim > 0, "dim must be positive"),
            (self.layers > 0, "layers must be positive"),
            (self.tau > 0.0, "tau must be positive"),
            (
                self.t_prime >= 1 && self.t_prime <= self.steps,
                "t-prime must lie in 1..=steps",
            ),
            (self.k >= 1, "k must be at least 1"),
            (self.pool >= self.k, "pool must be at least k"),
            (
                self.gamma >= 0.0 && self.delta >= 0.0 && self.align_weight >= 0.0,
                "loss weights must be nonnegative",
            ),
            (self.lr > 0.0, "lr must be positive"),
            (self.batch > 0, "batch must be positive"),
            (
                self.test_fraction > 0.0 && self.test_fraction < 1.0,
                "test-fraction must lie in (0, 1)",
            ),
            (self.knn > 0, "knn must be positive"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::invalid(*msg)),
            None => Ok(()),
        }
    }
}
