//! Trains a tiny model, saves it, reloads it and shows that predictions
//! match bit for bit and that a flipped byte is caught.
//!
//! Run with `cargo run --release --example checkpoint`.

use ndf_rec::pipeline::{evaluate, train, Checkpoint, CheckpointError, TrainConfig};
use ndf_rec::session::{generate_synthetic, SyntheticConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = generate_synthetic(
        3,
        &SyntheticConfig {
            sessions: 300,
            ..SyntheticConfig::default()
        },
    )?;
    let cfg = TrainConfig {
        epochs: 2,
        trees: 4,
        depth: 3,
        embedding_dim: 8,
        latent_dim: 8,
        ..TrainConfig::default()
    };
    let out = train(&ds, &cfg)?;
    let path = std::env::temp_dir().join("ndf-rec-example.ckpt");
    Checkpoint::from_model(&out.model).save(&path)?;
    let back = Checkpoint::load(&path)?.into_model()?;

    let a = evaluate(&out.model, &ds.test, cfg.q, 20)?;
    let b = evaluate(&back, &ds.test, cfg.q, 20)?;
    println!(
        "before save: {a:?}\nafter load:  {b:?}\nidentical: {}",
        a == b
    );

    let mut bytes = std::fs::read(&path)?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    match Checkpoint::from_bytes(&bytes) {
        Err(e @ CheckpointError::Checksum { .. }) => println!("corrupted copy rejected: {e}"),
        other => println!("unexpected: {:?}", other.map(|_| ())),
    }
    Ok(())
}
