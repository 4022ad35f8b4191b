use dsbr::checkpoint;
use dsbr::config::{RunConfig, Variant};
use dsbr::data::{self, synth_dataset, write_features, write_sessions, SessionDataset, SplitPolicy, SynthConfig};
use dsbr::metrics::DEFAULT_CUTOFFS;
use dsbr::model::Model;
use dsbr::sknn::Sknn;
use dsbr::train::{self, fit, infer_all};

fn small(seed: u64) -> SessionDataset {
    synth_dataset(&SynthConfig {
        n_clusters: 4,
        items_per_cluster: 10,
        n_sessions: 400,
        feature_dim: 24,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn small_config(seed: u64) -> RunConfig {
    RunConfig {
        dim: 16,
        steps: 8,
        t_prime: 4,
        pool: 64,
        epochs: 5,
        seed,
        ..RunConfig::default()
    }
}

#[test]
fn recommendation_loss_decreases_over_epochs() {
    let seeds = [1, 2, 3];
    let mut mean_rec = vec![0.0; 5];
    for seed in seeds {
        let (_, losses) = fit(&small_config(seed), &small(seed)).unwrap();
        for (m, l) in mean_rec.iter_mut().zip(&losses) {
            *m += l.rec / seeds.len() as f64;
        }
    }
    let decreases = mean_rec.windows(2).filter(|w| w[1] < w[0]).count();
    assert_eq!(decreases, 4, "{mean_rec:?}");
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let data = small(4);
    let cfg = RunConfig {
        epochs: 1,
        ..small_config(4)
    };
    let (model, _) = fit(&cfg, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.dsbr");
    checkpoint::save_params(&path, &model.store).unwrap();
    let mut restored = Model::new(&cfg, &data.train, data.n_items(), data.features.as_ref()).unwrap();
    checkpoint::load_params(&path, &mut restored.store).unwrap();
    let pairs = data.test_pairs();
    let a = infer_all(&model, &data.train, &pairs).unwrap();
    let b = infer_all(&restored, &data.train, &pairs).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.scores, y.scores);
        assert_eq!(x.latent, y.latent);
    }
}

#[test]
fn dataset_files_round_trip() {
    let data = small(5);
    let dir = tempfile::tempdir().unwrap();
    let sessions = dir.path().join("sessions.tsv");
    let features = dir.path().join("features.bin");
    let all: Vec<_> = data.train.iter().chain(&data.test).collect();
    write_sessions(&sessions, &all, &data.vocab).unwrap();
    write_features(&features, data.vocab.ids(), &data.features.as_ref().unwrap().values).unwrap();
    let loaded = data::load_dataset(&sessions, Some(&features), 1, SplitPolicy::default()).unwrap();
    assert_eq!(data::stats(&loaded), data::stats(&data));
    assert_eq!(loaded.test_pairs().len(), data.test_pairs().len());
    let by_id = |d: &SessionDataset, id: &str| {
        let i = d.vocab.get(id).unwrap();
        d.features.as_ref().unwrap().values.row(i).to_vec()
    };
    for id in data.vocab.ids() {
        assert_eq!(by_id(&loaded, id), by_id(&data, id));
    }
}

#[test]
fn trained_models_and_sknn_beat_random_ranking() {
    let data = small(6);
    let random_p10 = 100.0 * 10.0 / data.n_items() as f64;
    let (_, report) = train::run(&small_config(6), &data).unwrap();
    assert!(report.p_at[&10] > 1.5 * random_p10, "model P@10 {}", report.p_at[&10]);

    let train: Vec<&[usize]> = data.train.iter().map(|s| s.items.as_slice()).collect();
    let knn = Sknn::new(&train, data.n_items(), 100).unwrap();
    let test = data.test_pairs();
    let cases: Vec<(&[usize], usize)> = test.iter().map(|p| (p.prefix.as_slice(), p.target)).collect();
    let m = knn.evaluate(&cases, &DEFAULT_CUTOFFS).unwrap();
    assert!(m.p_at[&10] > 1.5 * random_p10, "sknn P@10 {}", m.p_at[&10]);
}

#[test]
fn variants_share_the_evaluation_protocol() {
    let data = small(7);
    for variant in Variant::ALL {
        let cfg = RunConfig {
            variant,
            epochs: 1,
            ..small_config(7)
        };
        let (_, report) = train::run(&cfg, &data).unwrap();
        assert_eq!(report.variant, variant);
        assert!(report.p_at[&10] <= report.p_at[&20]);
        assert!(report.mrr_at[&10] <= report.mrr_at[&20]);
    }
}
