//! Generates a planted synthetic dataset, writes it in the session file
//! format, reads it back and scores a trivial popularity ranking.
//!
//! Run with `cargo run --release --example session_metrics`.

use ndf_rec::session::metrics::target_rank;
use ndf_rec::session::{
    generate_synthetic, load_dataset_dir, planted_rule, two_proportion_z_test, write_dataset_dir,
    RankingReport, SyntheticConfig,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SyntheticConfig::default();
    let ds = generate_synthetic(7, &cfg)?;
    let dir = std::env::temp_dir().join("ndf-rec-session-metrics");
    write_dataset_dir(&ds, &dir)?;
    let (loaded, report) = load_dataset_dir(&dir)?;
    println!(
        "{} train / {} test sessions, {} items, dropped {:?}",
        loaded.train.len(),
        loaded.test.len(),
        loaded.items(),
        report
    );

    // Popularity: count training targets.
    let mut counts = vec![0.0; loaded.items()];
    for s in &loaded.train {
        counts[s.target] += 1.0;
    }
    let ranks: Vec<usize> = loaded
        .test
        .iter()
        .map(|s| target_rank(&counts, s.target))
        .collect();
    let popularity = RankingReport::from_ranks(&ranks, 20);
    print!("popularity\n{}", popularity.to_text());

    // The planted rule itself, as an oracle ranking.
    let ranks: Vec<usize> = loaded
        .test
        .iter()
        .map(|s| {
            let k = s.items.len();
            let hit = planted_rule(
                ds.vocab
                    .index_of(loaded.vocab.token(s.items[k - 2]))
                    .unwrap(),
                ds.vocab
                    .index_of(loaded.vocab.token(s.items[k - 1]))
                    .unwrap(),
                cfg.items,
            );
            let mut scores = vec![0.0; loaded.items()];
            scores[loaded.vocab.index_of(ds.vocab.token(hit)).unwrap()] = 1.0;
            target_rank(&scores, s.target)
        })
        .collect();
    let oracle = RankingReport::from_ranks(&ranks, 20);
    print!("rule oracle\n{}", oracle.to_text());

    let z = two_proportion_z_test(
        oracle.hits as u64,
        oracle.cases as u64,
        popularity.hits as u64,
        popularity.cases as u64,
    )?;
    println!("z = {:.3}, p = {:.3e}", z.z, z.p_value);
    Ok(())
}
