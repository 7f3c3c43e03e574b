//! End-to-end run on the planted synthetic task: the full model (forest
//! head, shrinkage, pruning) against the base predictor alone, with the
//! merger weight tuned on training accuracy.
//!
//! Run with `cargo run --release --example train_pipeline [seed]`.

use ndf_rec::pipeline::{default_q_grid, evaluate, train_with, tune_q, TrainConfig};
use ndf_rec::session::{generate_synthetic, SyntheticConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(1);
    let ds = generate_synthetic(seed, &SyntheticConfig::default())?;
    let full = TrainConfig {
        seed,
        epochs: 20,
        learning_rate: 0.03,
        embedding_dim: 16,
        latent_dim: 16,
        trees: 16,
        depth: 3,
        ..TrainConfig::default()
    };
    let base_only = TrainConfig {
        q: 1.0,
        use_forest: false,
        ..full.clone()
    };

    for (label, cfg) in [("full", &full), ("base only", &base_only)] {
        let out = train_with(&ds, cfg, |e| {
            if e.epoch % 5 == 0 {
                println!(
                    "  {label} epoch {:>2}: loss {:.4}, train HR@20 {:.3}",
                    e.epoch, e.loss, e.hit_rate
                );
            }
        })?;
        let q = if cfg.use_forest {
            let t = tune_q(&out.model, &ds.train, &default_q_grid())?;
            println!("  q curve {:?}", t.curve);
            t.best_q
        } else {
            1.0
        };
        let r = evaluate(&out.model, &ds.test, q, 20)?;
        println!(
            "{label}: q = {q}, test HR@20 = {:.4}, MRR@20 = {:.4}",
            r.hit_rate, r.mrr
        );
    }
    Ok(())
}
