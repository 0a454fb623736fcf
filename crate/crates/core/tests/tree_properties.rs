mod common;

use std::collections::HashSet;

use fedforest::data::{synth_generate, LabeledDataset};
use fedforest::eval::{confusion, metrics};
use fedforest::ledger::sha256;
use fedforest::tree::*;
use proptest::prelude::*;
use rand::Rng;

fn route(node: &TreeNode, x: &[f64]) -> f64 {
    match node {
        TreeNode::Leaf { score } => *score,
        TreeNode::Internal {
            feature,
            threshold,
            left,
            right,
        } => {
            if x[*feature] <= *threshold {
                route(left, x)
            } else {
                route(right, x)
            }
        }
    }
}

fn train_bacc(tree: &DecisionTree, data: &LabeledDataset) -> f64 {
    let scores: Vec<f64> = data.rows().iter().map(|x| tree.predict(x).unwrap()).collect();
    metrics(&confusion(&scores, data.labels()).unwrap()).bacc
}

#[test]
fn routing_is_total_and_matches_an_independent_router() {
    let data = synth_generate(5000, 10, 0.05, 2).unwrap();
    let tree = fit_tree(&data, &TreeTrainConfig::default(), EstimatorId::new(NodeId(0), 0)).unwrap();
    let mut rng = common::rng(9);
    for _ in 0..1000 {
        let x: Vec<f64> = (0..10).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let s = tree.predict(&x).unwrap();
        assert!((0.0..=1.0).contains(&s));
        assert_eq!(s, route(&tree.root, &x));
    }
    for x in data.rows() {
        assert_eq!(tree.predict(x).unwrap(), route(&tree.root, x));
    }
}

#[test]
fn deep_synthetic_tree_beats_chance_on_its_training_set() {
    let data = synth_generate(5000, 10, 0.02, 6).unwrap();
    let cfg = TreeTrainConfig {
        max_depth: 8,
        ..TreeTrainConfig::default()
    };
    let tree = fit_tree(&data, &cfg, EstimatorId::new(NodeId(0), 0)).unwrap();
    assert!(train_bacc(&tree, &data) > 0.5);
}

#[test]
fn feature_bagging_is_random_but_signal_is_reachable() {
    let mut rng = common::rng(4);
    let rows: Vec<Vec<f64>> = (0..400).map(|_| vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]).collect();
    let labels: Vec<u8> = rows.iter().map(|r| u8::from(r[1] > 0.7)).collect();
    let data = LabeledDataset::new(rows, labels, 2).unwrap();
    let (mut noise_first, mut good) = (false, false);
    for seed in 0..50 {
        let cfg = TreeTrainConfig {
            features_per_split: Some(1),
            seed,
            ..TreeTrainConfig::default()
        };
        let tree = fit_tree(&data, &cfg, EstimatorId::new(NodeId(0), seed)).unwrap();
        if let TreeNode::Internal { feature: 0, .. } = tree.root {
            noise_first = true;
        }
        good |= train_bacc(&tree, &data) > 0.9;
    }
    assert!(noise_first && good);
}

#[test]
fn training_is_deterministic() {
    let data = synth_generate(3000, 10, 0.05, 1).unwrap();
    let cfg = TreeTrainConfig {
        seed: 77,
        ..TreeTrainConfig::default()
    };
    let a = fit_tree(&data, &cfg, EstimatorId::new(NodeId(1), 5)).unwrap();
    let b = fit_tree(&data, &cfg, EstimatorId::new(NodeId(1), 5)).unwrap();
    assert_eq!(serialize_tree(&a), serialize_tree(&b));
}

#[test]
fn bootstrap_keeps_about_63_percent_distinct() {
    let rows: Vec<Vec<f64>> = (0..1000).map(|i| vec![i as f64]).collect();
    let data = LabeledDataset::new(rows, vec![0; 1000], 1).unwrap();
    let mut total = 0.0;
    for seed in 0..100 {
        let s = bootstrap_sample(&data, seed).unwrap();
        assert_eq!(s.len(), 1000);
        let distinct: HashSet<u64> = s.rows().iter().map(|r| r[0] as u64).collect();
        let frac = distinct.len() as f64 / 1000.0;
        assert!((0.58..=0.68).contains(&frac), "seed {seed}: {frac}");
        total += frac;
    }
    assert!((total / 100.0 - (1.0 - (-1.0f64).exp())).abs() < 0.01);

    let five = LabeledDataset::new((0..5).map(|i| vec![i as f64]).collect(), vec![0; 5], 1).unwrap();
    let differing = (0..100u64)
        .filter(|&s| bootstrap_sample(&five, 2 * s).unwrap() != bootstrap_sample(&five, 2 * s + 1).unwrap())
        .count();
    assert!(differing >= 99);
}

#[test]
fn every_flipped_byte_is_rejected_or_changes_the_digest() {
    let tree = DecisionTree::new(
        EstimatorId::new(NodeId(3), 9),
        TreeNode::split(0, 0.5, TreeNode::leaf(0.0), TreeNode::split(1, -1.25, TreeNode::leaf(0.25), TreeNode::leaf(1.0))),
        2,
    )
    .unwrap();
    let bytes = serialize_tree(&tree);
    let digest = sha256(&bytes);
    for i in 0..bytes.len() {
        for bit in 0..8 {
            let mut b = bytes.clone();
            b[i] ^= 1 << bit;
            if let Ok(t) = deserialize_tree(&b) {
                assert_ne!(t, tree, "byte {i} bit {bit}");
                assert_ne!(sha256(&serialize_tree(&t)), digest);
            }
        }
    }
}

proptest! {
    #[test]
    fn encoding_round_trips_and_is_canonical(seed in any::<u64>(), size in 0usize..40) {
        let mut rng = common::rng(seed);
        let tree = common::random_tree(&mut rng, seed, size, 4);
        let bytes = serialize_tree(&tree);
        let back = deserialize_tree(&bytes).unwrap();
        prop_assert_eq!(&back, &tree);
        prop_assert_eq!(serialize_tree(&back), bytes);
    }

    #[test]
    fn truncation_is_always_an_error(seed in any::<u64>(), size in 1usize..20, cut in 0.0f64..1.0) {
        let mut rng = common::rng(seed);
        let bytes = serialize_tree(&common::random_tree(&mut rng, 0, size, 3));
        let at = (cut * bytes.len() as f64) as usize;
        prop_assert!(deserialize_tree(&bytes[..at]).is_err());
    }
}
