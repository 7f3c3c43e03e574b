//! Property tests for the invariants that hold for any input.

use ndf_rec::alleviator::{LatentBatch, ShrinkOptions};
use ndf_rec::ndf::{
    prune_probabilities, route_probabilities, ForestConfig, LeafOutput, NeuralDecisionForest,
    PruningMode,
};
use ndf_rec::params::ParamStore;
use ndf_rec::pipeline::merge_vectors;
use ndf_rec::session::{hit_rate_from_ranks, mrr_from_ranks, ItemVocabulary};
use ndf_rec::{Graph, Tensor};
use proptest::prelude::*;

fn softmax(x: &[f64]) -> Vec<f64> {
    let mut g = Graph::new();
    let v = g.constant(Tensor::vector(x.to_vec()));
    let s = g.softmax(v);
    g.value(s).data().to_vec()
}

fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, n).prop_map(|x| softmax(&x))
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(x in prop::collection::vec(-30.0..30.0f64, 1..40)) {
        let p = softmax(&x);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert_eq!(argmax(&p), argmax(&x));
    }

    #[test]
    fn masked_entries_get_zero_probability(
        x in prop::collection::vec(-5.0..5.0f64, 2..20),
        seed in any::<u64>(),
    ) {
        let n = x.len();
        let mut mask: Vec<bool> = (0..n).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
        mask[seed as usize % n] = false;
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(x));
        let m = g.masked_fill(v, &mask).unwrap();
        let s = g.softmax(m);
        let p = g.value(s).data();
        for (pi, &mi) in p.iter().zip(&mask) {
            if mi {
                prop_assert_eq!(*pi, 0.0);
            }
        }
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn merge_stays_on_the_simplex(
        (a, b) in (2usize..30).prop_flat_map(|n| (simplex(n), simplex(n))),
        q in 0.0..=1.0f64,
    ) {
        let y = merge_vectors(&a, &b, q).unwrap();
        prop_assert!(y.iter().all(|&v| v >= 0.0));
        prop_assert!((y.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn shrunk_columns_are_scalar_multiples(
        (rows, cols, data) in (3usize..12, 1usize..5)
            .prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(-2.0..2.0f64, r * c))),
        positive_part in any::<bool>(),
    ) {
        let z = Tensor::new(vec![rows, cols], data).unwrap();
        let (out, report) = LatentBatch::new(z.clone()).js_shrink(ShrinkOptions { positive_part });
        for i in 0..rows {
            for j in 0..cols {
                prop_assert_eq!(out.z.get2(i, j), report.factors[j] * z.get2(i, j));
            }
        }
        if positive_part {
            prop_assert!(report.factors.iter().all(|&f| f >= 0.0));
        }
    }

    #[test]
    fn leaf_probabilities_sum_to_one(
        (depth, scores) in (1usize..7).prop_flat_map(|d| (Just(d), prop::collection::vec(-8.0..8.0f64, (1 << d) - 1))),
    ) {
        let p = route_probabilities(&scores, depth).unwrap();
        prop_assert_eq!(p.len(), 1 << depth);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn pruned_leaves_carry_no_mass(
        (scores, mask) in (1usize..6).prop_flat_map(|d| (
            prop::collection::vec(-4.0..4.0f64, (1 << d) - 1),
            prop::collection::vec(any::<bool>(), 1 << d),
        )),
    ) {
        prop_assume!(mask.iter().any(|&m| !m));
        let depth = mask.len().trailing_zeros() as usize;
        let p = route_probabilities(&scores, depth).unwrap();
        let pruned = prune_probabilities(&p, Some(&mask), PruningMode::Exclude);
        for (v, &m) in pruned.iter().zip(&mask) {
            if m {
                prop_assert_eq!(*v, 0.0);
            }
        }
        prop_assert!((pruned.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn hr_and_mrr_monotone_in_k(ranks in prop::collection::vec(1usize..60, 1..50), k in 1usize..50) {
        let (hr, mrr) = (hit_rate_from_ranks(&ranks, k), mrr_from_ranks(&ranks, k));
        prop_assert!(mrr <= hr);
        prop_assert!(hit_rate_from_ranks(&ranks, k + 1) >= hr);
        prop_assert!(mrr_from_ranks(&ranks, k + 1) >= mrr);
    }

    #[test]
    fn vocabulary_is_a_bijection(tokens in prop::collection::vec("[a-z0-9]{1,4}", 1..30)) {
        let v = ItemVocabulary::from_tokens(tokens.iter().map(String::as_str));
        for i in 0..v.len() {
            prop_assert_eq!(v.index_of(v.token(i)), Some(i));
        }
        for t in &tokens {
            prop_assert!(v.index_of(t).is_some());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forest_output_is_simplex_and_order_free(
        seed in any::<u64>(),
        trees in 1usize..6,
        depth in 1usize..4,
        z in prop::collection::vec(-2.0..2.0f64, 6),
    ) {
        let mut store = ParamStore::new();
        let cfg = ForestConfig { trees, depth, seed, ..ForestConfig::default() };
        let forest = NeuralDecisionForest::new(&mut store, cfg, 6, 7, LeafOutput::Softmax).unwrap();
        let y = forest.predict(&store, &z).unwrap();
        prop_assert!(y.iter().all(|&v| v >= 0.0));
        prop_assert!((y.iter().sum::<f64>() - 1.0).abs() <= 1e-9);

        let mut shuffled = forest.clone();
        shuffled.trees.reverse();
        shuffled.trees.rotate_left(seed as usize % trees);
        prop_assert_eq!(shuffled.predict(&store, &z).unwrap(), y);
    }

    #[test]
    fn backward_is_deterministic(x in prop::collection::vec(-3.0..3.0f64, 12)) {
        let grads = || {
            let mut g = Graph::new();
            let a = g.param(Tensor::new(vec![3, 4], x.clone()).unwrap());
            let s = g.sigmoid(a);
            let t = g.transpose(a).unwrap();
            let m = g.matmul(s, t).unwrap();
            let p = g.softmax(m);
            let l = g.log(p);
            let l = g.reshape(l, &[1, 9]).unwrap();
            let loss = g.sum_axis(l, 1).unwrap();
            g.backward(loss).unwrap().get(a).unwrap().clone()
        };
        prop_assert_eq!(grads(), grads());
    }

    #[test]
    fn tensor_length_matches_shape(rows in 1usize..8, cols in 1usize..8) {
        let t = Tensor::zeros(&[rows, cols]);
        prop_assert_eq!(t.len(), rows * cols);
        prop_assert!(Tensor::new(vec![rows, cols], vec![0.0; rows * cols + 1]).is_err());
    }
}
