//! Runs a small federation, then audits its ledger: verifies the chain,
//! counts execution records per kind, and shows that a single flipped byte
//! is caught.
//!
//!     cargo run --release --example ledger_audit

use fedforest::data::{prepare_nodes, synth_generate, PartitionSpec};
use fedforest::federation::{run_experiment, FederationConfig, Topology};
use fedforest::ledger::{verify_chain, AuditFilter, ExecutionKind, Payload, RecordType};
use fedforest::tree::NodeId;

fn main() -> fedforest::Result<()> {
    let data = synth_generate(20_000, 10, 0.01, 2)?;
    let spec = PartitionSpec {
        n_parts: 5,
        seed: 2,
        ..PartitionSpec::default()
    };
    let nodes = prepare_nodes(&data, &spec)?;
    let cfg = FederationConfig::with_defaults(Topology::ring(5), 2);
    let run = run_experiment(&nodes, &cfg)?;
    let ledger = &run.ledger;
    println!("{} records, chain ok: {}", ledger.len(), ledger.verify().is_ok());

    for kind in [ExecutionKind::Fit, ExecutionKind::Share, ExecutionKind::Incident] {
        let n = ledger
            .audit_query(&AuditFilter::Type(RecordType::Execution))
            .into_iter()
            .filter(|r| matches!(r.decoded(), Ok(Payload::Execution(x)) if x.kind == kind))
            .count();
        println!("{kind:?}: {n}");
    }
    println!("records by Node03: {}", ledger.audit_query(&AuditFilter::Author(NodeId(3))).len());
    println!("records in round 2: {}", ledger.audit_query(&AuditFilter::Round(2)).len());

    let mut records = ledger.records().to_vec();
    records[7].payload[0] ^= 0x01;
    println!("after flipping one payload byte: {:?}", verify_chain(&records));
    Ok(())
}
