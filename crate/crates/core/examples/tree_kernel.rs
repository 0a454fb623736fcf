//! Common-subtree counts and the weighted tree kernel on hand-built trees,
//! then a Gram matrix of trained trees.
//!
//!     cargo run --release --example tree_kernel

use fedforest::data::synth_generate;
use fedforest::tree::{fit_tree, DecisionTree, EstimatorId, NodeId, TreeNode, TreeTrainConfig};
use fedforest::treekernel::{common_subtree_count, gram, oracle, tree_kernel, KernelConfig};

fn main() -> fedforest::Result<()> {
    // root on feature 1, both children split on feature 2
    let depth2 = |x: f64| {
        TreeNode::split(
            1,
            x,
            TreeNode::split(2, 0.5, TreeNode::leaf(0.0), TreeNode::leaf(1.0)),
            TreeNode::split(2, -0.5, TreeNode::leaf(1.0), TreeNode::leaf(0.0)),
        )
    };
    let (a, b) = (depth2(2.0), depth2(3.0));
    println!("C(root, root) = {}", common_subtree_count(&a, &b)?);
    for s in oracle::enumerate_common_subtrees(&a, &b)? {
        println!("  {s}");
    }
    let ta = DecisionTree::new(EstimatorId::new(NodeId(0), 0), a, 3)?;
    let tb = DecisionTree::new(EstimatorId::new(NodeId(1), 0), b, 3)?;
    println!("k(A, B) = {}", tree_kernel(&ta, &tb));

    let data = synth_generate(5_000, 10, 0.02, 4)?;
    let trees: Vec<DecisionTree> = (0..8)
        .map(|i| {
            let cfg = TreeTrainConfig {
                max_depth: 4,
                seed: i,
                ..TreeTrainConfig::default()
            };
            fit_tree(&data, &cfg, EstimatorId::new(NodeId(0), i))
        })
        .collect::<Result<_, _>>()?;
    let g = gram(&trees, &KernelConfig::default());
    let (lo, hi) = g.eigen_range();
    println!("Gram of {} trees: eigenvalues in [{lo:.3e}, {hi:.3e}]", g.n());
    g.write_csv(std::io::stdout())?;
    Ok(())
}
