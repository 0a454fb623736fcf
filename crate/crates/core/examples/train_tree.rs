//! Trains one tree, reports its training balanced accuracy, and round-trips
//! it through the canonical encoding.
//!
//!     cargo run --release --example train_tree

use fedforest::data::synth_generate;
use fedforest::eval::{confusion, metrics};
use fedforest::tree::{deserialize_tree, fit_tree, serialize_tree, EstimatorId, NodeId, TreeTrainConfig};

fn main() -> fedforest::Result<()> {
    let data = synth_generate(20_000, 10, 0.01, 3)?;
    let cfg = TreeTrainConfig {
        max_depth: 8,
        seed: 3,
        ..TreeTrainConfig::default()
    };
    let tree = fit_tree(&data, &cfg, EstimatorId::new(NodeId(0), 0))?;
    println!("{} internal nodes, depth {}", tree.internal_count(), tree.depth());

    let scores: Vec<f64> = data.rows().iter().map(|x| tree.predict(x)).collect::<Result<_, _>>()?;
    let m = metrics(&confusion(&scores, data.labels())?);
    println!("train BAcc {:.3}  Prec {:.3}  Rec {:.3}", m.bacc, m.prec, m.rec);

    let bytes = serialize_tree(&tree);
    assert_eq!(deserialize_tree(&bytes)?, tree);
    println!("canonical encoding: {} bytes", bytes.len());
    Ok(())
}
