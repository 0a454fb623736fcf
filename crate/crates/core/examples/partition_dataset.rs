//! Splits a dataset into 20 unbalanced parts and prints the per-node table.
//!
//!     cargo run --release --example partition_dataset -- [creditcard.csv]

use fedforest::data::{load_csv, prepare_nodes, synth_generate, PartitionManifest, PartitionSpec, DEFAULT_LABEL_COLUMN};

fn main() -> fedforest::Result<()> {
    let data = match std::env::args().nth(1) {
        Some(path) => load_csv(path, DEFAULT_LABEL_COLUMN)?,
        None => synth_generate(100_000, 10, 0.002, 1)?,
    };
    println!("{} rows, {} features, {:.4}% anomalous", data.len(), data.dim(), 100.0 * data.fraud_ratio());

    let spec = PartitionSpec {
        seed: 1,
        ..PartitionSpec::default()
    };
    let nodes = prepare_nodes(&data, &spec)?;
    let manifest = PartitionManifest::new(spec, &nodes)?;
    println!("{:<7} {:>14} {:>14}", "node", "train (frauds)", "test (frauds)");
    for n in &manifest.nodes {
        println!(
            "{:<7} {:>7} / {:<5} {:>7} / {:<5}",
            n.node, n.train.samples, n.train.frauds, n.test.samples, n.test.frauds
        );
    }
    Ok(())
}
