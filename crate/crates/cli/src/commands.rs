use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use dsbr::checkpoint;
use dsbr::config::{RunConfig, Variant};
use dsbr::data::{
    self, align_features, filter_sessions, index_sessions, read_features, read_interactions, synth_dataset,
    write_features, write_sessions, SessionDataset, SplitPolicy, SynthConfig,
};
use dsbr::metrics::DEFAULT_CUTOFFS;
use dsbr::model::Model;
use dsbr::sknn::Sknn;
use dsbr::train::{self, EpochLosses, MetricsReport, Trainer};
use serde::Serialize;
use serde_json::Value;

use crate::args::{parse_seeds, AblateArgs, EvaluateArgs, ExportArgs, PrepareArgs, SynthArgs, TrainArgs};

const SESSIONS_FILE: &str = "sessions.tsv";
const FEATURES_FILE: &str = "features.bin";
const STATS_FILE: &str = "stats.json";
const CHECKPOINT_FILE: &str = "model.dsbr";
const CONFIG_FILE: &str = "config.txt";
const EPOCHS_FILE: &str = "epochs.csv";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Serializes `value` as a JSON object with an extra `config` entry.
fn json_with_config(value: &impl Serialize, config: &impl Serialize) -> Result<String> {
    let mut v = serde_json::to_value(value)?;
    if let Value::Object(map) = &mut v {
        map.insert("config".into(), serde_json::to_value(config)?);
    }
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

fn comment_lines(config: &RunConfig) -> String {
    config.to_text().lines().map(|l| format!("# {l}\n")).collect()
}

fn write_dataset_dir(out: &Path, dataset: &SessionDataset, meta: &impl Serialize) -> Result<()> {
    create_dir(out)?;
    let all: Vec<_> = dataset.train.iter().chain(&dataset.test).collect();
    write_sessions(&out.join(SESSIONS_FILE), &all, &dataset.vocab)?;
    if let Some(f) = &dataset.features {
        write_features(&out.join(FEATURES_FILE), dataset.vocab.ids(), &f.values)?;
    }
    let stats = data::stats(dataset);
    write_text(&out.join(STATS_FILE), &json_with_config(&stats, meta)?)?;
    println!(
        "{} items, {} sessions ({} train / {} test), avg length {:.2}",
        stats.items,
        stats.sessions,
        dataset.train.len(),
        dataset.test.len(),
        stats.avg_length
    );
    Ok(())
}

/// Loads a dataset directory under the split and filtering of `config`.
pub fn load_data(dir: &Path, config: &RunConfig) -> Result<SessionDataset> {
    let sessions = dir.join(SESSIONS_FILE);
    if !sessions.exists() {
        bail!("{}: no such file", sessions.display());
    }
    let features = dir.join(FEATURES_FILE);
    let features = features.exists().then_some(features);
    let split = SplitPolicy {
        test_fraction: config.test_fraction,
    };
    Ok(data::load_dataset(
        &sessions,
        features.as_deref(),
        config.min_item_count,
        split,
    )?)
}

pub fn prepare(args: &PrepareArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let text = read_text(&args.sessions)?;
    let raw = filter_sessions(read_interactions(&text)?, config.min_item_count);
    if raw.is_empty() {
        bail!("no sessions left after filtering {}", args.sessions.display());
    }
    let (sessions, vocab) = index_sessions(raw);
    let split = SplitPolicy {
        test_fraction: config.test_fraction,
    };
    let mut dataset = SessionDataset::temporal_split(sessions, vocab, split)?;
    if let Some(path) = &args.features {
        let (ids, values) = read_features(path)?;
        dataset.features = Some(align_features(&dataset.vocab, &ids, &values));
    }
    write_dataset_dir(&args.out, &dataset, &config)
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let seed = match args.seed {
        Some(s) => s,
        None => match std::env::var("DSBR_SEED") {
            Ok(s) => s.parse().context("DSBR_SEED")?,
            Err(_) => 0,
        },
    };
    let cfg = SynthConfig {
        n_clusters: args.clusters,
        items_per_cluster: args.items_per_cluster,
        n_sessions: args.n_sessions,
        session_len: args.session_len,
        leak_prob: args.leak_prob,
        seed,
        feature_dim: args.feature_dim,
        ..SynthConfig::default()
    };
    let dataset = synth_dataset(&cfg)?;
    write_dataset_dir(&args.out, &dataset, &cfg)
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let dataset = load_data(&args.data, &config)?;
    create_dir(&args.out)?;
    write_text(&args.out.join(CONFIG_FILE), &config.to_text())?;
    let model = Model::new(&config, &dataset.train, dataset.n_items(), dataset.features.as_ref())?;
    let mut trainer = Trainer::new(model)?;
    let pairs = dataset.train_pairs();
    let mut csv = comment_lines(&config);
    csv.push_str(EpochLosses::CSV_HEADER);
    csv.push('\n');
    for _ in 0..config.epochs {
        let losses = trainer.train_epoch(&dataset.train, &pairs)?;
        println!(
            "epoch {:>3}  rec {:.4}  total {:.4}",
            losses.epoch, losses.rec, losses.total
        );
        csv.push_str(&losses.csv_row());
        csv.push('\n');
    }
    write_text(&args.out.join(EPOCHS_FILE), &csv)?;
    checkpoint::save_params(&args.out.join(CHECKPOINT_FILE), &trainer.model.store)?;
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}

fn read_epochs(path: &Path) -> Result<Vec<EpochLosses>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            bail!("{}: malformed row `{line}`", path.display());
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse()
                .with_context(|| format!("{}: bad number `{}`", path.display(), f[i]))
        };
        out.push(EpochLosses {
            epoch: f[0].parse()?,
            rec: num(1)?,
            diffusion: num(2)?,
            retrieval: num(3)?,
            self_diffusion: num(4)?,
            contrastive: num(5)?,
            align: num(6)?,
            total: num(7)?,
        });
    }
    Ok(out)
}

/// Rebuilds a trained model from its checkpoint directory.
fn load_model(dir: &Path, dataset: &SessionDataset, config: &RunConfig) -> Result<Model> {
    let mut model = Model::new(config, &dataset.train, dataset.n_items(), dataset.features.as_ref())?;
    checkpoint::load_params(&dir.join(CHECKPOINT_FILE), &mut model.store)?;
    Ok(model)
}

fn checkpoint_config(dir: &Path) -> Result<RunConfig> {
    Ok(RunConfig::from_text(&read_text(&dir.join(CONFIG_FILE))?)?)
}

#[derive(Serialize)]
struct BaselineReport {
    variant: &'static str,
    seed: u64,
    knn: usize,
    p_at: std::collections::BTreeMap<usize, f64>,
    mrr_at: std::collections::BTreeMap<usize, f64>,
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    if args.sknn {
        let config = args.config.resolve()?;
        let dataset = load_data(&args.data, &config)?;
        let train: Vec<&[usize]> = dataset.train.iter().map(|s| s.items.as_slice()).collect();
        let knn = Sknn::new(&train, dataset.n_items(), config.knn)?;
        let test = dataset.test_pairs();
        let cases: Vec<(&[usize], usize)> = test.iter().map(|p| (p.prefix.as_slice(), p.target)).collect();
        let m = knn.evaluate(&cases, &DEFAULT_CUTOFFS)?;
        let report = BaselineReport {
            variant: "sknn",
            seed: config.seed,
            knn: config.knn,
            p_at: m.p_at,
            mrr_at: m.mrr_at,
        };
        write_text(&args.out, &json_with_config(&report, &config)?)?;
        print_metrics("sknn", &report.p_at, &report.mrr_at);
        return Ok(());
    }
    let dir = args.model.as_ref().expect("clap enforces --model without --sknn");
    let mut config = checkpoint_config(dir)?;
    args.config.apply_flags(&mut config)?;
    config.validate()?;
    let dataset = load_data(&args.data, &config)?;
    let model = load_model(dir, &dataset, &config)?;
    let metrics = train::evaluate(&model, &dataset.train, &dataset.test_pairs(), &DEFAULT_CUTOFFS)?;
    let losses = read_epochs(&dir.join(EPOCHS_FILE))?;
    let report = MetricsReport::new(&config, metrics, losses);
    write_text(&args.out, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    print_metrics(config.variant.name(), &report.p_at, &report.mrr_at);
    Ok(())
}

fn print_metrics(name: &str, p: &std::collections::BTreeMap<usize, f64>, mrr: &std::collections::BTreeMap<usize, f64>) {
    let parts: Vec<String> = p
        .iter()
        .map(|(k, v)| format!("P@{k} {v:.2}  MRR@{k} {:.2}", mrr[k]))
        .collect();
    println!("{name}: {}", parts.join("  "));
}

pub fn ablate(args: &AblateArgs) -> Result<()> {
    let base = args.config.resolve()?;
    let variants: Vec<Variant> = args
        .variants
        .split(',')
        .map(|v| v.trim().parse())
        .collect::<Result<_, _>>()?;
    let seeds = parse_seeds(&args.seeds)?;
    let dataset = load_data(&args.data, &base)?;
    create_dir(&args.out)?;
    let mut csv = comment_lines(&base);
    csv.push_str("variant,seed,p_at_10,p_at_20,mrr_at_10,mrr_at_20\n");
    for &variant in &variants {
        for &seed in &seeds {
            let config = RunConfig {
                variant,
                seed,
                ..base.clone()
            };
            let (_, report) = train::run(&config, &dataset)?;
            let path = args.out.join(format!("metrics_{variant}_seed{seed}.json"));
            write_text(&path, &(serde_json::to_string_pretty(&report)? + "\n"))?;
            print_metrics(&format!("{variant} seed {seed}"), &report.p_at, &report.mrr_at);
            csv.push_str(&format!(
                "{variant},{seed},{},{},{},{}\n",
                report.p_at[&10], report.p_at[&20], report.mrr_at[&10], report.mrr_at[&20]
            ));
        }
    }
    write_text(&args.out.join("comparison.csv"), &csv)
}

pub fn export(args: &ExportArgs) -> Result<()> {
    let config = checkpoint_config(&args.model)?;
    create_dir(&args.out)?;
    write_text(&args.out.join(CONFIG_FILE), &config.to_text())?;
    let records = checkpoint::read(&args.model.join(CHECKPOINT_FILE))?;
    let tables: Vec<(&str, &_)> = records
        .iter()
        .filter(|(name, _)| name == "E_id" || name == "E_mo")
        .map(|(name, t)| (name.as_str(), t))
        .collect();
    if tables.len() != 2 {
        bail!("{}: checkpoint lacks embedding tables", args.model.display());
    }
    checkpoint::write(&args.out.join("embeddings.dsbr"), &tables)?;

    let Some(data_dir) = &args.data else {
        return Ok(());
    };
    let dataset = load_data(data_dir, &config)?;
    let model = load_model(&args.model, &dataset, &config)?;
    let pairs = dataset.test_pairs();
    let outputs = train::infer_all(&model, &dataset.train, &pairs)?;
    let mut session_rows = Vec::new();
    let mut latent_rows = Vec::new();
    let mut neighbors = Vec::new();
    writeln!(neighbors, "test_session\ttop1_train_session\tweight")?;
    let mut offset = 0;
    for out in &outputs {
        let chunk = &pairs[offset..offset + out.session.rows()];
        offset += chunk.len();
        session_rows.extend_from_slice(out.session.data());
        latent_rows.extend_from_slice(out.latent.data());
        if let Some(nb) = &out.neighbors {
            for (p, n) in chunk.iter().zip(nb) {
                writeln!(
                    neighbors,
                    "{}\t{}\t{}",
                    dataset.test[p.session].id, dataset.train[n.rows[0]].id, n.weights[0]
                )?;
            }
        }
    }
    let d = config.dim;
    let s_id = dsbr::Tensor::new(vec![pairs.len(), d], session_rows)?;
    let s_n0 = dsbr::Tensor::new(vec![pairs.len(), d], latent_rows)?;
    checkpoint::write(&args.out.join("sessions.dsbr"), &[("s_id", &s_id), ("s_N0", &s_n0)])?;
    if config.variant.uses_retrieval() {
        fs::write(args.out.join("neighbors.tsv"), neighbors).context("writing neighbors.tsv")?;
    }
    Ok(())
}
