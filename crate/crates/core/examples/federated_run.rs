//! Runs one federated experiment on synthetic data and compares it with the
//! disconnected baseline.
//!
//!     cargo run --release --example federated_run -- [ring|complete|disconnected] [rows]

use std::time::Instant;

use fedforest::data::{prepare_nodes, synth_generate, PartitionSpec};
use fedforest::eval::{improvement_report, metrics_report, provenance_matrix, Metric, Split};
use fedforest::federation::{run_experiment, FederationConfig, TopologySpec};

fn main() -> fedforest::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let topology = TopologySpec::parse_preset(&args.next().unwrap_or_else(|| "ring".into()))?;
    let rows: usize = args.next().map(|s| s.parse().expect("rows")).unwrap_or(100_000);

    let data = synth_generate(rows, 10, 0.002, 7)?;
    let spec = PartitionSpec {
        seed: 7,
        ..PartitionSpec::default()
    };
    let nodes = prepare_nodes(&data, &spec)?;

    let t = Instant::now();
    let cfg = FederationConfig::with_defaults(topology.build(nodes.len())?, 7);
    let run = run_experiment(&nodes, &cfg)?;
    println!("federated run: {:.1?}", t.elapsed());

    let t = Instant::now();
    let base_cfg = FederationConfig::with_defaults(TopologySpec::Disconnected.build(nodes.len())?, 7);
    let base = run_experiment(&nodes, &base_cfg)?;
    println!("baseline run:  {:.1?}", t.elapsed());

    let test = metrics_report(&run.snapshots, None, Split::Test)?;
    for m in Metric::ALL {
        let a = &test.aggregates[&m];
        println!("test {:<5} mean {:.3} median {:.3}", m.name(), a.mean, a.median);
    }
    let imp = improvement_report(&run.snapshots, &base.snapshots)?;
    for split in [Split::Test, Split::Train] {
        for m in Metric::ALL {
            let s = &imp.split(split).summary[&m];
            println!(
                "{:<5} {:<5} improvement mean {:+.3} median {:+.3} (max {:+.3} at {})",
                split.name(),
                m.name(),
                s.mean,
                s.median,
                s.max,
                s.max_node
            );
        }
    }
    let prov = provenance_matrix(&run.snapshots, cfg.rounds)?;
    let own: f64 = prov.nodes.iter().enumerate().map(|(i, _)| prov.percent[i][i]).sum::<f64>() / prov.nodes.len() as f64;
    println!("share of own trees in final ensembles: {own:.1}%");
    println!("ledger: {} records, verified: {}", run.ledger.len(), run.ledger.verify().is_ok());
    Ok(())
}
