//! Neural decision trees, random leaf pruning and forests.
//!
//! A tree of depth `d` has a decision network mapping the tree's fixed
//! feature subset of the latent to `2^d - 1` split scores (breadth-first).
//! The sigmoid of a score is the probability of routing *left*. Leaf-reaching
//! probabilities are products along root-to-leaf paths, enumerated left to
//! right. During training each leaf is dropped with probability `r` and the
//! survivors' probabilities are passed through a softmax; at evaluation the
//! same softmax is applied without a mask. The tree's prediction is the
//! leaf-probability mixture of its leaf rows, and a forest averages trees.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng as _;

use crate::graph::{Graph, Var};
use crate::params::{uniform, Bound, ParamId, ParamStore};
use crate::rng::{stream, Rng};
use crate::tensor::{ShapeError, Tensor};
use crate::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruningMode {
    /// No mask and no softmax: the raw leaf probabilities are used.
    Off,
    /// Masked leaves are excluded from the softmax.
    Exclude,
    /// Masked leaves are set to 0 before the softmax, so they keep some mass.
    LiteralZero,
}

impl fmt::Display for PruningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PruningMode::Off => "off",
            PruningMode::Exclude => "exclude",
            PruningMode::LiteralZero => "literal-zero",
        })
    }
}

impl FromStr for PruningMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(PruningMode::Off),
            "exclude" => Ok(PruningMode::Exclude),
            "literal-zero" => Ok(PruningMode::LiteralZero),
            _ => Err(format!(
                "unknown pruning mode `{s}` (off, exclude, literal-zero)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestConfig {
    pub trees: usize,
    pub depth: usize,
    pub pruning_rate: f64,
    /// Fraction of latent features each tree sees.
    pub keep_fraction: f64,
    pub pruning: PruningMode,
    /// Seed for feature masks and initial weights.
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            trees: 128,
            depth: 5,
            pruning_rate: 0.3,
            keep_fraction: 0.8,
            pruning: PruningMode::Exclude,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.trees == 0 {
            return Err("forest needs at least one tree".into());
        }
        if !(1..=20).contains(&self.depth) {
            return Err(format!("depth {} outside 1..=20", self.depth));
        }
        if !(0.0..1.0).contains(&self.pruning_rate) {
            return Err(format!("pruning rate {} outside [0, 1)", self.pruning_rate));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(format!(
                "keep fraction {} outside (0, 1]",
                self.keep_fraction
            ));
        }
        Ok(())
    }

    pub fn leaves(&self) -> usize {
        1 << self.depth
    }

    /// Features kept per tree for a latent of `dim` entries.
    pub fn kept_features(&self, dim: usize) -> usize {
        ((self.keep_fraction * dim as f64).ceil() as usize).clamp(1, dim)
    }
}

/// How leaf rows become per-leaf outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafOutput {
    /// Row-wise softmax: each leaf holds a distribution over items.
    Softmax,
    /// Raw values, for regression heads.
    Raw,
}

/// Whether a forward pass draws pruning masks.
pub enum Phase<'a> {
    Train(&'a mut Rng),
    Eval,
}

impl Phase<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Phase::Train(_))
    }
}

/// Turns split scores into leaf-reaching probabilities.
pub fn route(g: &mut Graph, scores: Var, depth: usize) -> Result<Var, ModelError> {
    let s = g.value(scores);
    if let Some(pos) = s.data().iter().position(|v| !v.is_finite()) {
        return Err(ModelError::NonFiniteScore {
            row: pos / s.cols(),
            node: pos % s.cols(),
        });
    }
    let split = g.sigmoid(scores);
    Ok(g.tree_route(split, depth)?)
}

/// Leaf-reaching probabilities for one row of split scores.
pub fn route_probabilities(scores: &[f64], depth: usize) -> Result<Vec<f64>, ModelError> {
    let mut g = Graph::new();
    let s = g.constant(Tensor::new(vec![1, scores.len()], scores.to_vec())?);
    let p = route(&mut g, s, depth)?;
    Ok(g.value(p).data().to_vec())
}

/// Draws a `rows x leaves` drop mask with each entry set with probability
/// `rate`. Rows with every leaf dropped are redrawn.
pub fn leaf_mask(rows: usize, leaves: usize, rate: f64, rng: &mut Rng) -> Vec<bool> {
    let mut mask = vec![false; rows * leaves];
    if rate <= 0.0 {
        return mask;
    }
    for row in mask.chunks_mut(leaves) {
        loop {
            for m in row.iter_mut() {
                *m = rng.random_bool(rate);
            }
            if row.iter().any(|&m| !m) {
                break;
            }
        }
    }
    mask
}

/// Applies the pruning transform to leaf probabilities (`rows x leaves`).
pub fn prune(
    g: &mut Graph,
    p_leaf: Var,
    mode: PruningMode,
    rate: f64,
    phase: &mut Phase<'_>,
) -> Result<Var, ModelError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(ModelError::PruningRate(rate));
    }
    if mode == PruningMode::Off {
        return Ok(p_leaf);
    }
    let (rows, leaves) = (g.value(p_leaf).rows(), g.value(p_leaf).cols());
    let masked = match phase {
        Phase::Train(rng) if rate > 0.0 => {
            let mask = leaf_mask(rows, leaves, rate, rng);
            match mode {
                PruningMode::Exclude => g.masked_fill(p_leaf, &mask)?,
                _ => {
                    let keep = mask.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect();
                    let keep = g.constant(Tensor::new(vec![rows, leaves], keep)?);
                    g.mul(p_leaf, keep)?
                }
            }
        }
        _ => p_leaf,
    };
    Ok(g.softmax(masked))
}

/// Plain version of [`prune`] for one row with an explicit mask.
pub fn prune_probabilities(p_leaf: &[f64], mask: Option<&[bool]>, mode: PruningMode) -> Vec<f64> {
    if mode == PruningMode::Off {
        return p_leaf.to_vec();
    }
    let mut row: Vec<f64> = match mask {
        Some(mask) => p_leaf
            .iter()
            .zip(mask)
            .map(|(&p, &m)| match (m, mode) {
                (false, _) => p,
                (true, PruningMode::Exclude) => f64::NEG_INFINITY,
                (true, _) => 0.0,
            })
            .collect(),
        None => p_leaf.to_vec(),
    };
    crate::graph::softmax_in_place(&mut row);
    row
}

/// One soft decision tree.
#[derive(Debug, Clone)]
pub struct NeuralDecisionTree {
    /// Position in the forest; fixes the summation order.
    pub index: usize,
    pub depth: usize,
    pub features: Vec<usize>,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub leaves: ParamId,
}

fn tree_name(t: usize, part: &str) -> String {
    format!("ndf.tree{t}.{part}")
}

impl NeuralDecisionTree {
    /// Split scores for every row of the latent batch, `rows x (2^d - 1)`.
    pub fn split_scores(&self, g: &mut Graph, bound: &Bound, z: Var) -> Result<Var, ModelError> {
        let x = g.select_columns(z, &self.features)?;
        let h = g.matmul(x, bound.var(self.w1))?;
        let h = g.add(h, bound.var(self.b1))?;
        let h = g.sigmoid(h);
        let s = g.matmul(h, bound.var(self.w2))?;
        Ok(g.add(s, bound.var(self.b2))?)
    }

    /// Tree prediction for every row of the latent batch.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        z: Var,
        cfg: &ForestConfig,
        leaf_output: LeafOutput,
        phase: &mut Phase<'_>,
    ) -> Result<Var, ModelError> {
        let scores = self.split_scores(g, bound, z)?;
        let p_leaf = route(g, scores, self.depth)?;
        let p = prune(g, p_leaf, cfg.pruning, cfg.pruning_rate, phase)?;
        let rows = match leaf_output {
            LeafOutput::Softmax => g.softmax(bound.var(self.leaves)),
            LeafOutput::Raw => bound.var(self.leaves),
        };
        Ok(g.matmul(p, rows)?)
    }
}

/// An average of soft decision trees.
#[derive(Debug, Clone)]
pub struct NeuralDecisionForest {
    pub trees: Vec<NeuralDecisionTree>,
    pub config: ForestConfig,
    pub leaf_output: LeafOutput,
    input_dim: usize,
    outputs: usize,
}

impl NeuralDecisionForest {
    /// Registers every tree's parameters in `store`. Feature subsets and
    /// initial weights are drawn from `config.seed`.
    pub fn new(
        store: &mut ParamStore,
        config: ForestConfig,
        input_dim: usize,
        outputs: usize,
        leaf_output: LeafOutput,
    ) -> Result<Self, ModelError> {
        config.validate().map_err(ModelError::Config)?;
        let mut mask_rng = stream(config.seed, "forest.features");
        let mut init_rng = stream(config.seed, "forest.init");
        let gamma = config.kept_features(input_dim);
        let hidden = 2 * gamma;
        let internal = config.leaves() - 1;
        let mut trees = Vec::with_capacity(config.trees);
        for t in 0..config.trees {
            let mut features = sample(&mut mask_rng, input_dim, gamma).into_vec();
            features.sort_unstable();
            let fixed = Tensor::vector(features.iter().map(|&f| f as f64).collect());
            store.add_fixed(tree_name(t, "features"), fixed);
            let r = &mut init_rng;
            let b_in = 1.0 / (gamma as f64).sqrt();
            let b_hid = 1.0 / (hidden as f64).sqrt();
            let b_leaf = 1.0 / (outputs.max(config.leaves()) as f64).sqrt();
            trees.push(NeuralDecisionTree {
                index: t,
                depth: config.depth,
                w1: store.add(tree_name(t, "w1"), uniform(&[gamma, hidden], b_in, r)),
                b1: store.add(tree_name(t, "b1"), uniform(&[1, hidden], b_in, r)),
                w2: store.add(tree_name(t, "w2"), uniform(&[hidden, internal], b_hid, r)),
                b2: store.add(tree_name(t, "b2"), uniform(&[1, internal], b_hid, r)),
                leaves: store.add(
                    tree_name(t, "leaves"),
                    uniform(&[config.leaves(), outputs], b_leaf, r),
                ),
                features,
            });
        }
        Ok(Self {
            trees,
            config,
            leaf_output,
            input_dim,
            outputs,
        })
    }

    /// Re-attaches to a forest whose parameters are already in `store`.
    pub fn from_store(
        store: &ParamStore,
        config: ForestConfig,
        input_dim: usize,
        leaf_output: LeafOutput,
    ) -> Result<Self, ModelError> {
        let lookup = |t: usize, part: &str| {
            store.id(&tree_name(t, part)).ok_or_else(|| {
                ModelError::Shape(ShapeError::new("missing forest parameter", &[t], &[]))
            })
        };
        let mut trees = Vec::with_capacity(config.trees);
        let mut outputs = 0;
        for t in 0..config.trees {
            let features = store
                .get(lookup(t, "features")?)
                .value
                .data()
                .iter()
                .map(|&f| f as usize)
                .collect();
            let leaves = lookup(t, "leaves")?;
            let shape = store.get(leaves).value.shape();
            if shape[0] != config.leaves() {
                return Err(ShapeError::new("leaves", shape, &[config.leaves()]).into());
            }
            outputs = shape[1];
            trees.push(NeuralDecisionTree {
                index: t,
                depth: config.depth,
                features,
                w1: lookup(t, "w1")?,
                b1: lookup(t, "b1")?,
                w2: lookup(t, "w2")?,
                b2: lookup(t, "b2")?,
                leaves,
            });
        }
        Ok(Self {
            trees,
            config,
            leaf_output,
            input_dim,
            outputs,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    /// Average of the tree predictions, summed in ascending tree index
    /// whatever the order of `trees`.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        z: Var,
        phase: &mut Phase<'_>,
    ) -> Result<Var, ModelError> {
        let dim = g.value(z).cols();
        if dim != self.input_dim {
            return Err(
                ShapeError::new("forest input", g.value(z).shape(), &[self.input_dim]).into(),
            );
        }
        let mut order: Vec<&NeuralDecisionTree> = self.trees.iter().collect();
        order.sort_by_key(|t| t.index);
        let mut acc: Option<Var> = None;
        for tree in order {
            let p = tree.forward(g, bound, z, &self.config, self.leaf_output, phase)?;
            acc = Some(match acc {
                None => p,
                Some(a) => g.add(a, p)?,
            });
        }
        let sum = acc.expect("at least one tree");
        Ok(g.scale(sum, 1.0 / self.trees.len() as f64))
    }

    /// Evaluation-mode prediction for one latent vector.
    pub fn predict(&self, store: &ParamStore, latent: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let z = g.constant(Tensor::new(vec![1, latent.len()], latent.to_vec())?);
        let y = self.forward(&mut g, &bound, z, &mut Phase::Eval)?;
        Ok(g.value(y).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_scores_route_uniformly() {
        assert_eq!(route_probabilities(&[0.0; 3], 2).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn hand_evaluated_route() {
        let l3 = 3f64.ln();
        let p = route_probabilities(&[l3, 0.0, l3], 2).unwrap();
        let expected = [0.375, 0.375, 0.1875, 0.0625];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{p:?}");
        }
    }

    #[test]
    fn saturated_split_routes_left() {
        let p = route_probabilities(&[800.0], 1).unwrap();
        assert_eq!(p, vec![1.0, 0.0]);
    }

    #[test]
    fn non_finite_score_names_node() {
        let err = route_probabilities(&[0.0, f64::NAN, 0.0], 2).unwrap_err();
        assert!(matches!(
            err,
            ModelError::NonFiniteScore { row: 0, node: 1 }
        ));
    }

    #[test]
    fn prune_examples() {
        let p = [0.375, 0.375, 0.1875, 0.0625];
        let all = prune_probabilities(&p, None, PruningMode::Exclude);
        let e: Vec<f64> = p.iter().map(|v| v.exp()).collect();
        let total: f64 = e.iter().sum();
        for (a, b) in all.iter().zip(&e) {
            assert!((a - b / total).abs() < 1e-15, "{all:?}");
        }
        assert!((all[0] - 0.2808).abs() < 5e-5 && (all[3] - 0.2055).abs() < 5e-5);
        let mask = [false, true, false, false];
        let dropped = prune_probabilities(&p, Some(&mask), PruningMode::Exclude);
        assert_eq!(dropped[1], 0.0);
        for (a, b) in dropped.iter().zip([0.3905, 0.0, 0.3238, 0.2857]) {
            assert!((a - b).abs() < 5e-5, "{dropped:?}");
        }
        let literal = prune_probabilities(&p, Some(&mask), PruningMode::LiteralZero);
        assert!(literal[1] > 0.0);
        assert_eq!(
            prune_probabilities(&[0.25; 4], None, PruningMode::Exclude),
            vec![0.25; 4]
        );
        assert_eq!(
            prune_probabilities(&p, Some(&mask), PruningMode::Off),
            p.to_vec()
        );
    }

    #[test]
    fn pruning_rate_of_one_rejected() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::vector(vec![0.5, 0.5]));
        assert!(matches!(
            prune(&mut g, p, PruningMode::Exclude, 1.0, &mut Phase::Eval),
            Err(ModelError::PruningRate(_))
        ));
    }

    #[test]
    fn mask_keeps_a_leaf_alive() {
        let mut rng = stream(5, "mask");
        let mask = leaf_mask(500, 2, 0.95, &mut rng);
        for row in mask.chunks(2) {
            assert!(row.iter().any(|&m| !m));
        }
    }

    fn forest(trees: usize, outputs: usize) -> (ParamStore, NeuralDecisionForest) {
        let mut store = ParamStore::new();
        let cfg = ForestConfig {
            trees,
            depth: 2,
            seed: 11,
            ..ForestConfig::default()
        };
        let f =
            NeuralDecisionForest::new(&mut store, cfg, 6, outputs, LeafOutput::Softmax).unwrap();
        (store, f)
    }

    #[test]
    fn uniform_leaves_give_uniform_prediction() {
        let (mut store, f) = forest(1, 5);
        let id = f.trees[0].leaves;
        store.get_mut(id).value = Tensor::zeros(&[4, 5]);
        let p = f
            .predict(&store, &[0.3, -0.1, 0.2, 0.9, -1.0, 0.0])
            .unwrap();
        for v in p {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn forest_output_is_a_distribution() {
        let (store, f) = forest(8, 7);
        let p = f
            .predict(&store, &[0.3, -0.1, 0.2, 0.9, -1.0, 0.0])
            .unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn single_tree_forest_equals_tree() {
        let (store, f) = forest(1, 4);
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let z = g.constant(Tensor::new(vec![1, 6], vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.0]).unwrap());
        let tree = f.trees[0]
            .forward(&mut g, &b, z, &f.config, f.leaf_output, &mut Phase::Eval)
            .unwrap();
        let all = f.forward(&mut g, &b, z, &mut Phase::Eval).unwrap();
        assert_eq!(g.value(tree), g.value(all));
    }

    #[test]
    fn feature_masks_are_fixed_subsets() {
        let (store, f) = forest(4, 3);
        for t in &f.trees {
            assert_eq!(t.features.len(), 5); // ceil(0.8 * 6)
            assert!(t.features.windows(2).all(|w| w[0] < w[1]));
        }
        let again =
            NeuralDecisionForest::from_store(&store, f.config.clone(), 6, LeafOutput::Softmax)
                .unwrap();
        for (a, b) in again.trees.iter().zip(&f.trees) {
            assert_eq!(a.features, b.features);
        }
    }

    #[test]
    fn pruning_mode_round_trips_through_text() {
        for m in [
            PruningMode::Off,
            PruningMode::Exclude,
            PruningMode::LiteralZero,
        ] {
            assert_eq!(m.to_string().parse::<PruningMode>().unwrap(), m);
        }
    }
}
