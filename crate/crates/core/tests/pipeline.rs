//! Training-level behaviour: reproducibility, the base-only special case
//! and learning progress.

use ndf_rec::ndf::PruningMode;
use ndf_rec::pipeline::{evaluate, train, Checkpoint, TrainConfig};
use ndf_rec::session::{generate_synthetic, SessionDataset, SyntheticConfig};

fn data(seed: u64) -> SessionDataset {
    generate_synthetic(
        seed,
        &SyntheticConfig {
            sessions: 400,
            ..SyntheticConfig::default()
        },
    )
    .unwrap()
}

fn small(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        epochs: 3,
        learning_rate: 0.03,
        trees: 4,
        depth: 3,
        embedding_dim: 8,
        latent_dim: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_bit_reproducible() {
    let ds = data(1);
    let a = train(&ds, &small(1)).unwrap();
    let b = train(&ds, &small(1)).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(
        Checkpoint::from_model(&a.model).to_bytes(),
        Checkpoint::from_model(&b.model).to_bytes()
    );
}

#[test]
fn different_seeds_differ() {
    let ds = data(1);
    let a = train(&ds, &small(1)).unwrap();
    let b = train(&ds, &small(2)).unwrap();
    assert_ne!(a.history, b.history);
}

#[test]
fn inert_forest_matches_base_only() {
    let ds = data(2);
    let inert = TrainConfig {
        q: 1.0,
        alleviator: false,
        pruning: PruningMode::Off,
        detach_forest: true,
        ..small(2)
    };
    let base = TrainConfig {
        use_forest: false,
        ..inert.clone()
    };
    let a = train(&ds, &inert).unwrap();
    let b = train(&ds, &base).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(
        evaluate(&a.model, &ds.test, 1.0, 20).unwrap(),
        evaluate(&b.model, &ds.test, 1.0, 20).unwrap()
    );
}

#[test]
fn training_accuracy_improves() {
    for seed in 1..=5 {
        let ds = data(seed);
        let out = train(
            &ds,
            &TrainConfig {
                epochs: 5,
                ..small(seed)
            },
        )
        .unwrap();
        let (first, last) = (&out.history[0], out.history.last().unwrap());
        assert!(
            last.hit_rate > first.hit_rate,
            "seed {seed}: {first:?} -> {last:?}"
        );
        assert!(last.loss < first.loss, "seed {seed}");
    }
}

#[test]
fn evaluation_batch_size_is_irrelevant_without_shrinkage() {
    let ds = data(3);
    let mut cfg = small(3);
    cfg.alleviator = false;
    let mut model = train(&ds, &cfg).unwrap().model;
    let a = evaluate(&model, &ds.test, 0.5, 20).unwrap();
    model.config.eval_batch_size = 7;
    let b = evaluate(&model, &ds.test, 0.5, 20).unwrap();
    assert_eq!(a.hits, b.hits);
    assert!((a.mrr - b.mrr).abs() < 1e-12);
}
