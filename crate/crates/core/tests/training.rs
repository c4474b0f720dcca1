use attnsup::metrics::MetricThresholds;
use attnsup::synthworld::{generate, WorldConfig};
use attnsup::trainer::{evaluate, train, Model, TrainConfig};

#[test]
fn default_toy_run_lowers_the_loss() {
    let d = generate(&WorldConfig::default()).unwrap();
    let cfg = TrainConfig::default();
    let out = train(&d, &cfg).unwrap();
    let first = out.history.epoch_mean_total(0, out.steps_per_epoch);
    let last = out.history.epoch_mean_total(cfg.epochs - 1, out.steps_per_epoch);
    assert!(last < first, "epoch 1 mean loss {first}, final {last}");
    assert_eq!(out.history.evals.len(), cfg.epochs);
}

#[test]
fn checkpoint_round_trip_preserves_evaluation() {
    let d = generate(&WorldConfig {
        num_pairs: 120,
        ..WorldConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.json");
    let cfg = TrainConfig {
        epochs: 3,
        checkpoint: Some(path.clone()),
        ..TrainConfig::default()
    };
    let out = train(&d, &cfg).unwrap();
    let loaded = Model::load(&path).unwrap();
    assert_eq!(loaded, out.model);
    let t = MetricThresholds::default();
    let before = evaluate(&out.model, &d.test, &cfg.attention, &t).unwrap();
    let after = evaluate(&loaded, &d.test, &cfg.attention, &t).unwrap();
    assert_eq!(before, after);
}

#[test]
fn best_model_has_the_best_validation_rsum() {
    let d = generate(&WorldConfig {
        num_pairs: 200,
        ..WorldConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        ..TrainConfig::default()
    };
    let out = train(&d, &cfg).unwrap();
    let best = out.history.evals.iter().map(|e| e.rsum).fold(f64::NEG_INFINITY, f64::max);
    let rec = out.history.evals.iter().find(|e| e.epoch == out.history.best_epoch).unwrap();
    assert_eq!(rec.rsum, best);
    let val = evaluate(&out.model, &d.val, &cfg.attention, &MetricThresholds::default()).unwrap();
    assert_eq!(val.retrieval.rsum, best);
}

#[test]
fn noiseless_world_attention_recall() {
    let d = generate(&WorldConfig {
        cooccurrence_bias: 0.0,
        context_noise_sigma: 0.0,
        ..WorldConfig::default()
    })
    .unwrap();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
    let fresh = Model::init(d.meta.vocab_size(), d.meta.embed_dim(), d.meta.embed_dim(), &mut rng);
    let r = evaluate(&fresh, &d.test, &Default::default(), &MetricThresholds::default()).unwrap();
    let fresh_recall = r.attention.recall;
    // Random token embeddings attend more or less at random.
    assert!(fresh_recall < 0.6, "fresh model recall {fresh_recall}");
    let oracle = Model::from_embeddings(attnsup::numkit::Tensor::from_rows(&d.meta.prototypes).unwrap());
    let r = evaluate(&oracle, &d.test, &Default::default(), &MetricThresholds::default()).unwrap();
    // Prototype embeddings make each word's own object regions dominate.
    assert_eq!(r.attention.recall, 1.0);
    assert!(r.attention.precision > 0.9);
}
