#![allow(dead_code)]

use fedforest::data::{synth_generate, LabeledDataset};
use fedforest::tree::{fit_tree, DecisionTree, EstimatorId, NodeId, TreeNode, TreeTrainConfig};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random tree with at most `max_internal` internal nodes whose split
/// features come from `0..features`. A small feature alphabet makes common
/// subtrees likely.
pub fn random_node(rng: &mut impl Rng, max_internal: usize, features: usize) -> TreeNode {
    let mut budget = max_internal;
    grow(rng, &mut budget, features, 0)
}

fn grow(rng: &mut impl Rng, budget: &mut usize, features: usize, depth: usize) -> TreeNode {
    let p_leaf = if depth == 0 { 0.1 } else { 0.35 };
    if *budget == 0 || rng.gen_bool(p_leaf) {
        return TreeNode::leaf(rng.gen_range(0.0..=1.0));
    }
    *budget -= 1;
    let feature = rng.gen_range(0..features);
    let threshold = rng.gen_range(-3.0..3.0);
    let left = grow(rng, budget, features, depth + 1);
    let right = grow(rng, budget, features, depth + 1);
    TreeNode::split(feature, threshold, left, right)
}

pub fn random_tree(rng: &mut impl Rng, id: u64, max_internal: usize, features: usize) -> DecisionTree {
    DecisionTree::new(EstimatorId::new(NodeId(0), id), random_node(rng, max_internal, features), features).unwrap()
}

pub fn trained_trees(data: &LabeledDataset, n: usize, max_depth: usize, seed: u64) -> Vec<DecisionTree> {
    (0..n as u64)
        .map(|i| {
            let cfg = TreeTrainConfig {
                max_depth,
                seed: seed * 1000 + i,
                ..TreeTrainConfig::default()
            };
            fit_tree(data, &cfg, EstimatorId::new(NodeId((i % 3) as u32), i)).unwrap()
        })
        .collect()
}

pub fn small_synth(seed: u64) -> LabeledDataset {
    synth_generate(4000, 10, 0.02, seed).unwrap()
}
