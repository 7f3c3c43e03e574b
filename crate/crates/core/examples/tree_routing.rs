//! Leaf-reaching probabilities of a soft tree, the pruning transform, and
//! a small forest's item distribution.
//!
//! Run with `cargo run --release --example tree_routing`.

use ndf_rec::ndf::{
    prune_probabilities, route_probabilities, ForestConfig, LeafOutput, NeuralDecisionForest,
    PruningMode,
};
use ndf_rec::params::ParamStore;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scores = [3f64.ln(), 0.0, 3f64.ln()];
    let p = route_probabilities(&scores, 2)?;
    println!("p_leaf          {p:?}");
    println!(
        "eval softmax    {:?}",
        prune_probabilities(&p, None, PruningMode::Exclude)
    );
    let mask = [false, true, false, false];
    println!(
        "leaf 1 excluded {:?}",
        prune_probabilities(&p, Some(&mask), PruningMode::Exclude)
    );
    println!(
        "leaf 1 zeroed   {:?}",
        prune_probabilities(&p, Some(&mask), PruningMode::LiteralZero)
    );

    let mut store = ParamStore::new();
    let cfg = ForestConfig {
        trees: 8,
        depth: 3,
        seed: 4,
        ..ForestConfig::default()
    };
    let forest = NeuralDecisionForest::new(&mut store, cfg, 6, 5, LeafOutput::Softmax)?;
    for (t, tree) in forest.trees.iter().enumerate().take(3) {
        println!("tree {t} sees features {:?}", tree.features);
    }
    let y = forest.predict(&store, &[0.5, -0.2, 0.1, 0.9, -1.1, 0.3])?;
    println!(
        "forest prediction {y:?} (sum {:.12})",
        y.iter().sum::<f64>()
    );
    Ok(())
}
