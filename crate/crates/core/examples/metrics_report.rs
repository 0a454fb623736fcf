//! Per-node metrics, improvement over the disconnected baseline, and the
//! provenance matrix for a ring of 20 nodes.
//!
//!     cargo run --release --example metrics_report

use fedforest::data::{prepare_nodes, synth_generate, PartitionSpec};
use fedforest::eval::{improvement_report, metrics_report, provenance_matrix, Metric, Split};
use fedforest::federation::{run_experiment, FederationConfig, Topology};

fn main() -> fedforest::Result<()> {
    let data = synth_generate(100_000, 10, 0.002, 1)?;
    let nodes = prepare_nodes(&data, &PartitionSpec { seed: 1, ..PartitionSpec::default() })?;
    let ring = run_experiment(&nodes, &FederationConfig::with_defaults(Topology::ring(20), 1))?;
    let alone = run_experiment(&nodes, &FederationConfig::with_defaults(Topology::disconnected(20), 1))?;

    let report = metrics_report(&ring.snapshots, None, Split::Test)?;
    println!("node    bacc   prec   rec");
    for n in &report.per_node {
        println!("{}  {:.3}  {:.3}  {:.3}", n.node, n.metrics.bacc, n.metrics.prec, n.metrics.rec);
    }

    let imp = improvement_report(&ring.snapshots, &alone.snapshots)?;
    imp.write_summary_csv(std::io::stdout())?;

    let prov = provenance_matrix(&ring.snapshots, 4)?;
    let own: Vec<String> = prov.nodes.iter().map(|&n| format!("{:.0}", prov.get(n, n))).collect();
    println!("own-tree share per node (%): {}", own.join(" "));
    println!("mean test BAcc gain: {:+.3}", imp.test.summary[&Metric::BAcc].mean);
    Ok(())
}
