use fedforest::ledger::*;
use fedforest::tree::NodeId;
use proptest::prelude::*;
use rand::{Rng, RngCore};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const AUTH: NodeId = NodeId(500);

fn members() -> Vec<KeyPair> {
    (0..3).map(|i| KeyPair::derive(3, NodeId(i))).collect()
}

/// Genesis, image, process, and two execution records.
fn five_record_chain() -> (Ledger, KeyPair, Vec<KeyPair>) {
    let auth = KeyPair::derive(3, AUTH);
    let keys = members();
    let mut ledger = Ledger::genesis(AUTH, &auth).unwrap();
    ledger.register_image("algo", b"artifact", AUTH, &auth).unwrap();
    ledger
        .create_process(
            ProcessRecord {
                process_id: "p".into(),
                algorithm_digest: sha256(b"artifact"),
                consortium: keys.iter().enumerate().map(|(i, k)| (NodeId(i as u32), k.public())).collect(),
                current_iteration: 0,
                status: ProcessStatus::Running,
            },
            &auth,
        )
        .unwrap();
    ledger
        .append_execution_record("p", 1, ExecutionKind::Fit, NodeId(0), sha256(b"fit"), &keys[0])
        .unwrap();
    ledger
        .append_execution_record("p", 1, ExecutionKind::Share, NodeId(1), sha256(b"share"), &keys[1])
        .unwrap();
    (ledger, auth, keys)
}

#[test]
fn every_single_bit_flip_is_caught_at_its_record() {
    let (ledger, _, _) = five_record_chain();
    assert_eq!(ledger.len(), 5);
    assert!(ledger.verify().is_ok());
    let mut flips = 0;
    for i in 0..ledger.len() {
        let bytes = ledger.records()[i].encode();
        for byte in 0..bytes.len() {
            for bit in 0..8 {
                let mut b = bytes.clone();
                b[byte] ^= 1 << bit;
                let Ok(tampered) = LedgerRecord::decode(&b) else { continue };
                let mut chain = ledger.records().to_vec();
                chain[i] = tampered;
                assert_eq!(verify_chain(&chain).first_bad(), Some(i), "record {i} byte {byte} bit {bit}");
                flips += 1;
            }
        }
    }
    assert!(flips > 1000);
}

#[test]
fn reordering_or_dropping_records_is_caught() {
    let (ledger, _, _) = five_record_chain();
    let records = ledger.records();
    let mut swapped = records.to_vec();
    swapped.swap(3, 4);
    assert_eq!(verify_chain(&swapped).first_bad(), Some(3));
    let dropped: Vec<LedgerRecord> = records.iter().enumerate().filter(|(i, _)| *i != 2).map(|(_, r)| r.clone()).collect();
    assert_eq!(verify_chain(&dropped).first_bad(), Some(2));
    assert!(verify_chain(&records[..4]).is_ok());
}

#[test]
fn forged_submissions_are_rejected_without_side_effects() {
    let (mut ledger, _, keys) = five_record_chain();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for n in 0..100u32 {
        let author = NodeId(rng.gen_range(0..3));
        let payload = Payload::Execution(ExecutionPayload {
            process_id: "p".into(),
            round: 2,
            kind: ExecutionKind::Fit,
            payload_digest: sha256(&n.to_le_bytes()),
        })
        .encode();
        let msg = signing_message(RecordType::Execution, author, &payload);
        let signature = match n % 4 {
            0 => {
                let mut secret = [0u8; 32];
                rng.fill_bytes(&mut secret);
                KeyPair::from_secret(secret).sign(&msg)
            }
            1 => {
                let other = signing_message(RecordType::Execution, author, b"something else");
                keys[author.0 as usize].sign(&other)
            }
            2 => {
                let mut sig = keys[author.0 as usize].sign(&msg);
                sig.truncate(rng.gen_range(0..64));
                sig
            }
            _ => keys[(author.0 as usize + 1) % 3].sign(&msg),
        };
        let (len, head, state) = (ledger.len(), ledger.head_hash(), ledger.state().clone());
        assert!(ledger.submit(RecordType::Execution, payload, author, signature).is_err(), "forgery {n}");
        assert_eq!((ledger.len(), ledger.head_hash()), (len, head));
        assert_eq!(ledger.state(), &state);
    }
    assert!(ledger.verify().is_ok());
}

#[test]
fn persisted_chain_round_trips_and_edits_are_detected() {
    let (ledger, _, _) = five_record_chain();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ledger.jsonl");
    ledger.save(&path).unwrap();
    let back = Ledger::load(&path).unwrap();
    assert_eq!(back.records(), ledger.records());

    let text = std::fs::read_to_string(&path).unwrap();
    let edited = text.replacen("\"author\":1", "\"author\":2", 1);
    assert_ne!(edited, text);
    std::fs::write(&path, edited).unwrap();
    assert!(Ledger::load(&path).is_err());
    let records = Ledger::read_records(&path).unwrap();
    assert!(!verify_chain(&records).is_ok());
}

#[test]
fn completed_process_accepts_no_more_executions() {
    let (mut ledger, auth, keys) = five_record_chain();
    ledger.update_process("p", 1, ProcessStatus::Completed, &auth).unwrap();
    let before = ledger.len();
    assert!(ledger
        .append_execution_record("p", 2, ExecutionKind::Fit, NodeId(0), sha256(b"late"), &keys[0])
        .is_err());
    assert!(ledger.update_process("p", 2, ProcessStatus::Running, &auth).is_err());
    assert_eq!(ledger.len(), before);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_honest_histories_verify(rounds in 1u32..6, ops in proptest::collection::vec((0u32..3, any::<bool>()), 0..30)) {
        let (mut ledger, auth, keys) = five_record_chain();
        for r in 1..=rounds {
            ledger.update_process("p", r, ProcessStatus::Running, &auth).unwrap();
            for (i, &(node, share)) in ops.iter().enumerate() {
                let kind = if share { ExecutionKind::Share } else { ExecutionKind::Fit };
                let digest = sha256(format!("{r}/{i}").as_bytes());
                ledger.append_execution_record("p", r, kind, NodeId(node), digest, &keys[node as usize]).unwrap();
            }
        }
        prop_assert!(ledger.verify().is_ok());
        prop_assert_eq!(ledger.len(), 5 + rounds as usize * (1 + ops.len()));
        let mut replayed = Ledger::empty();
        for rec in ledger.records() {
            let h = replayed.submit(rec.record_type, rec.payload.clone(), rec.author, rec.signature.clone()).unwrap().this_hash;
            prop_assert_eq!(h, rec.this_hash);
        }
    }
}
