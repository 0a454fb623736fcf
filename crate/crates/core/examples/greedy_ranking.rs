//! Ranks an ensemble with the greedy power-function criterion and compares
//! each step with the exact posterior variance.
//!
//!     cargo run --release --example greedy_ranking

use fedforest::data::synth_generate;
use fedforest::ranking::{p_greedy_rank, posterior_variance_exact};
use fedforest::tree::{fit_tree, DecisionTree, EstimatorId, NodeId, TreeTrainConfig};
use fedforest::treekernel::{gram, KernelConfig};

fn main() -> fedforest::Result<()> {
    let data = synth_generate(5_000, 10, 0.02, 5)?;
    let trees: Vec<DecisionTree> = (0..8)
        .map(|i| {
            let cfg = TreeTrainConfig {
                max_depth: 3,
                seed: 100 + i,
                ..TreeTrainConfig::default()
            };
            fit_tree(&data, &cfg, EstimatorId::new(NodeId(0), i))
        })
        .collect::<Result<_, _>>()?;
    let g = gram(&trees, &KernelConfig::default());
    let ranking = p_greedy_rank(&g, g.n())?;

    let mut picked = Vec::new();
    for step in &ranking.steps {
        let exact = posterior_variance_exact(&g, &picked, step.index)?;
        println!(
            "{:>2}  tree {:<3} power {:.6e}  variance {:.6e}  exact {:.6e}",
            picked.len(),
            step.id.counter,
            step.power(),
            step.variance,
            exact
        );
        picked.push(step.index);
    }
    if ranking.appended() > 0 {
        println!("{} trees appended after the residual vanished", ranking.appended());
    }
    ranking.write_trace(std::io::stdout())?;
    Ok(())
}
