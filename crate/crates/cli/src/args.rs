use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use dsbr::config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "dsbr",
    version,
    about = "Session recommender with generated latent neighbors"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter and split a session log; write the dataset directory and stats.
    Prepare(PrepareArgs),
    /// Generate a synthetic clustered dataset directory.
    Synth(SynthArgs),
    /// Train a model and write its checkpoint directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the SKNN baseline) on the test split.
    Evaluate(EvaluateArgs),
    /// Train and evaluate several variants over several seeds.
    Ablate(AblateArgs),
    /// Dump embedding tables and, optionally, per-session representations.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Tab-separated `session_id item_id timestamp` log.
    #[arg(long)]
    pub sessions: PathBuf,
    /// Feature file with an item-id manifest.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 8)]
    pub clusters: usize,
    #[arg(long, default_value_t = 25)]
    pub items_per_cluster: usize,
    #[arg(long = "n-sessions", default_value_t = 2000)]
    pub n_sessions: usize,
    #[arg(long, default_value_t = 4)]
    pub session_len: usize,
    #[arg(long, default_value_t = 0.1)]
    pub leak_prob: f64,
    #[arg(long, default_value_t = 100)]
    pub feature_dim: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `prepare` or `synth`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory written by `train`.
    #[arg(long, required_unless_present = "sknn")]
    pub model: Option<PathBuf>,
    /// Evaluate the session k-nearest-neighbors baseline instead.
    #[arg(long)]
    pub sknn: bool,
    /// Metrics JSON path.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated variant names.
    #[arg(long, default_value = "full,no-RAD,no-FDRQ,no-SAD")]
    pub variants: String,
    /// Inclusive range `a..b` or comma-separated list.
    #[arg(long, default_value = "1..5")]
    pub seeds: String,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also export test-session representations, generated neighbors and
    /// top-1 retrieved neighbors for this dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

/// Hyperparameter overrides. Precedence: flag, then `--config` file, then
/// `DSBR_SEED` (seed only), then built-in defaults.
#[derive(Debug, Default, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long = "config")]
    pub file: Option<PathBuf>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub t_prime: Option<usize>,
    #[arg(long)]
    pub beta_min: Option<f64>,
    #[arg(long)]
    pub beta_max: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub pool: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub align_weight: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub rec_loss: Option<String>,
    #[arg(long)]
    pub freeze_modality: Option<bool>,
    #[arg(long)]
    pub self_loops: Option<bool>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long)]
    pub min_item_count: Option<usize>,
    #[arg(long)]
    pub knn: Option<usize>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<(&'static str, Option<String>)> {
        fn s<T: ToString>(v: &Option<T>) -> Option<String> {
            v.as_ref().map(ToString::to_string)
        }
        vec![
            ("dim", s(&self.dim)),
            ("layers", s(&self.layers)),
            ("tau", s(&self.tau)),
            ("steps", s(&self.steps)),
            ("t-prime", s(&self.t_prime)),
            ("beta-min", s(&self.beta_min)),
            ("beta-max", s(&self.beta_max)),
            ("k", s(&self.k)),
            ("pool", s(&self.pool)),
            ("gamma", s(&self.gamma)),
            ("delta", s(&self.delta)),
            ("align-weight", s(&self.align_weight)),
            ("lr", s(&self.lr)),
            ("batch", s(&self.batch)),
            ("epochs", s(&self.epochs)),
            ("seed", s(&self.seed)),
            ("variant", self.variant.clone()),
            ("rec-loss", self.rec_loss.clone()),
            ("freeze-modality", s(&self.freeze_modality)),
            ("self-loops", s(&self.self_loops)),
            ("test-fraction", s(&self.test_fraction)),
            ("min-item-count", s(&self.min_item_count)),
            ("knn", s(&self.knn)),
        ]
    }

    /// Layers flags over `base`, which already holds file and env values.
    pub fn apply_flags(&self, base: &mut RunConfig) -> Result<()> {
        for (key, value) in self.overrides() {
            if let Some(v) = value {
                base.set(key, &v).with_context(|| format!("--{key}"))?;
            }
        }
        Ok(())
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Ok(seed) = std::env::var("DSBR_SEED") {
            cfg.set("seed", &seed).context("DSBR_SEED")?;
        }
        if let Some(path) = &self.file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_text(&text)
                .with_context(|| format!("in {}", path.display()))?;
        }
        self.apply_flags(&mut cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `a..b` (inclusive) or `a,b,c`.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = spec.split_once("..") {
        let a: u64 = a.trim().parse().with_context(|| format!("bad seed range `{spec}`"))?;
        let b: u64 = b.trim().parse().with_context(|| format!("bad seed range `{spec}`"))?;
        anyhow::ensure!(a <= b, "empty seed range `{spec}`");
        return Ok((a..=b).collect());
    }
    spec.split(',')
        .map(|s| s.trim().parse().with_context(|| format!("bad seed `{s}`")))
        .collect()
}
