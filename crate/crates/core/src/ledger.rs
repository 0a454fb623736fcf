//! Append-only, hash-chained, signed audit ledger.
//!
//! Every record commits to its predecessor through `prev_hash` and carries
//! a signature from its author over `(type, author, payload)`. Payloads use
//! a canonical length-prefixed encoding with no floating-point fields, so
//! digests are bit-exact across platforms. Public keys enter the chain in
//! the genesis record (the authority) and in process records (consortium
//! members); a replay of the chain therefore needs nothing but the chain.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tree::NodeId;

pub type Digest32 = [u8; 32];

pub const SIGNATURE_SCHEME: &str = "ed25519";
const SIGNING_DOMAIN: &[u8] = b"fedforest.ledger.v1";

pub fn sha256(bytes: &[u8]) -> Digest32 {
    Sha256::digest(bytes).into()
}

pub struct KeyPair {
    signing: SigningKey,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyPair({})", hex::encode(self.public()))
    }
}

impl KeyPair {
    pub fn from_secret(secret: [u8; 32]) -> Self {
        Self {
            signing: SigningKey::from_bytes(&secret),
        }
    }

    /// Deterministic key for a simulated participant.
    pub fn derive(seed: u64, node: NodeId) -> Self {
        let mut h = Sha256::new();
        h.update(b"fedforest.key");
        h.update(seed.to_le_bytes());
        h.update(node.0.to_le_bytes());
        Self::from_secret(h.finalize().into())
    }

    pub fn public(&self) -> [u8; 32] {
        self.signing.verifying_key().to_bytes()
    }

    pub fn sign(&self, msg: &[u8]) -> Vec<u8> {
        self.signing.sign(msg).to_bytes().to_vec()
    }
}

pub fn verify_signature(public: &[u8; 32], msg: &[u8], signature: &[u8]) -> bool {
    let Ok(key) = VerifyingKey::from_bytes(public) else {
        return false;
    };
    let Ok(sig) = Signature::from_slice(signature) else {
        return false;
    };
    key.verify(msg, &sig).is_ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordType {
    Genesis,
    Image,
    Process,
    Execution,
    Model,
}

impl RecordType {
    fn tag(self) -> u8 {
        match self {
            RecordType::Genesis => 0,
            RecordType::Image => 1,
            RecordType::Process => 2,
            RecordType::Execution => 3,
            RecordType::Model => 4,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => RecordType::Genesis,
            1 => RecordType::Image,
            2 => RecordType::Process,
            3 => RecordType::Execution,
            4 => RecordType::Model,
            _ => return None,
        })
    }
}

// ---- canonical payload encoding ----

#[derive(Default)]
struct Enc(Vec<u8>);

impl Enc {
    fn u8(mut self, v: u8) -> Self {
        self.0.push(v);
        self
    }
    fn u32(mut self, v: u32) -> Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    fn u64(mut self, v: u64) -> Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    fn bytes(mut self, v: &[u8]) -> Self {
        self.0.extend_from_slice(&(v.len() as u32).to_le_bytes());
        self.0.extend_from_slice(v);
        self
    }
    fn str(self, v: &str) -> Self {
        self.bytes(v.as_bytes())
    }
}

struct Dec<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::malformed(self.pos, "unexpected end of payload"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn digest(&mut self) -> Result<Digest32> {
        Ok(self.take(32)?.try_into().unwrap())
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn string(&mut self) -> Result<String> {
        let at = self.pos;
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::malformed(at, "invalid utf-8"))
    }
    fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::malformed(self.pos, "trailing payload bytes"));
        }
        Ok(())
    }
}

// ---- payload schemas ----

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenesisPayload {
    pub scheme: String,
    pub authority: NodeId,
    pub authority_key: [u8; 32],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePayload {
    pub name: String,
    pub artifact_digest: Digest32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcessStatus {
    Running,
    Completed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessRecord {
    pub process_id: String,
    pub algorithm_digest: Digest32,
    /// Participating nodes with their verification keys.
    pub consortium: Vec<(NodeId, [u8; 32])>,
    pub current_iteration: u32,
    pub status: ProcessStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecutionKind {
    Fit,
    Share,
    /// A received payload failed verification and was discarded.
    Incident,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionPayload {
    pub process_id: String,
    pub round: u32,
    pub kind: ExecutionKind,
    pub payload_digest: Digest32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelPayload {
    pub process_id: String,
    pub model_digest: Digest32,
    pub estimator_count: u32,
    /// Nodes allowed to access the model; initially the consortium.
    pub access: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Genesis(GenesisPayload),
    Image(ImagePayload),
    Process(ProcessRecord),
    Execution(ExecutionPayload),
    Model(ModelPayload),
}

impl Payload {
    pub fn record_type(&self) -> RecordType {
        match self {
            Payload::Genesis(_) => RecordType::Genesis,
            Payload::Image(_) => RecordType::Image,
            Payload::Process(_) => RecordType::Process,
            Payload::Execution(_) => RecordType::Execution,
            Payload::Model(_) => RecordType::Model,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        match self {
            Payload::Genesis(g) => Enc::default().str(&g.scheme).u32(g.authority.0).bytes(&g.authority_key).0,
            Payload::Image(i) => Enc::default().str(&i.name).bytes(&i.artifact_digest).0,
            Payload::Process(p) => {
                let mut e = Enc::default()
                    .str(&p.process_id)
                    .bytes(&p.algorithm_digest)
                    .u32(p.consortium.len() as u32);
                for (node, key) in &p.consortium {
                    e = e.u32(node.0).bytes(key);
                }
                e.u32(p.current_iteration).u8(match p.status {
                    ProcessStatus::Running => 0,
                    ProcessStatus::Completed => 1,
                })
                .0
            }
            Payload::Execution(x) => Enc::default()
                .str(&x.process_id)
                .u32(x.round)
                .u8(match x.kind {
                    ExecutionKind::Fit => 0,
                    ExecutionKind::Share => 1,
                    ExecutionKind::Incident => 2,
                })
                .bytes(&x.payload_digest)
                .0,
            Payload::Model(m) => {
                let mut e = Enc::default()
                    .str(&m.process_id)
                    .bytes(&m.model_digest)
                    .u32(m.estimator_count)
                    .u32(m.access.len() as u32);
                for node in &m.access {
                    e = e.u32(node.0);
                }
                e.0
            }
        }
    }

    pub fn decode(record_type: RecordType, bytes: &[u8]) -> Result<Self> {
        let mut d = Dec::new(bytes);
        let key32 = |d: &mut Dec<'_>| -> Result<[u8; 32]> {
            let at = d.pos;
            d.bytes()?
                .try_into()
                .map_err(|_| Error::malformed(at, "expected a 32-byte field"))
        };
        let payload = match record_type {
            RecordType::Genesis => Payload::Genesis(GenesisPayload {
                scheme: d.string()?,
                authority: NodeId(d.u32()?),
                authority_key: key32(&mut d)?,
            }),
            RecordType::Image => Payload::Image(ImagePayload {
                name: d.string()?,
                artifact_digest: key32(&mut d)?,
            }),
            RecordType::Process => {
                let process_id = d.string()?;
                let algorithm_digest = key32(&mut d)?;
                let n = d.u32()? as usize;
                let mut consortium = Vec::with_capacity(n.min(1024));
                for _ in 0..n {
                    consortium.push((NodeId(d.u32()?), key32(&mut d)?));
                }
                let current_iteration = d.u32()?;
                let at = d.pos;
                let status = match d.u8()? {
                    0 => ProcessStatus::Running,
                    1 => ProcessStatus::Completed,
                    s => return Err(Error::malformed(at, format!("unknown status {s}"))),
                };
                Payload::Process(ProcessRecord {
                    process_id,
                    algorithm_digest,
                    consortium,
                    current_iteration,
                    status,
                })
            }
            RecordType::Execution => {
                let process_id = d.string()?;
                let round = d.u32()?;
                let at = d.pos;
                let kind = match d.u8()? {
                    0 => ExecutionKind::Fit,
                    1 => ExecutionKind::Share,
                    2 => ExecutionKind::Incident,
                    k => return Err(Error::malformed(at, format!("unknown execution kind {k}"))),
                };
                Payload::Execution(ExecutionPayload {
                    process_id,
                    round,
                    kind,
                    payload_digest: key32(&mut d)?,
                })
            }
            RecordType::Model => {
                let process_id = d.string()?;
                let model_digest = key32(&mut d)?;
                let estimator_count = d.u32()?;
                let n = d.u32()? as usize;
                let mut access = Vec::with_capacity(n.min(1024));
                for _ in 0..n {
                    access.push(NodeId(d.u32()?));
                }
                Payload::Model(ModelPayload {
                    process_id,
                    model_digest,
                    estimator_count,
                    access,
                })
            }
        };
        d.finish()?;
        Ok(payload)
    }
}

/// The message an author signs.
pub fn signing_message(record_type: RecordType, author: NodeId, payload: &[u8]) -> Vec<u8> {
    let mut msg = Vec::with_capacity(SIGNING_DOMAIN.len() + 9 + payload.len());
    msg.extend_from_slice(SIGNING_DOMAIN);
    msg.push(record_type.tag());
    msg.extend_from_slice(&author.0.to_le_bytes());
    msg.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    msg.extend_from_slice(payload);
    msg
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerRecord {
    pub index: u64,
    pub prev_hash: Digest32,
    pub record_type: RecordType,
    pub payload: Vec<u8>,
    pub author: NodeId,
    pub signature: Vec<u8>,
    pub this_hash: Digest32,
}

impl LedgerRecord {
    pub fn compute_hash(&self) -> Digest32 {
        let mut h = Sha256::new();
        h.update(self.index.to_le_bytes());
        h.update(self.prev_hash);
        h.update([self.record_type.tag()]);
        h.update((self.payload.len() as u32).to_le_bytes());
        h.update(&self.payload);
        h.update(self.author.0.to_le_bytes());
        h.update((self.signature.len() as u32).to_le_bytes());
        h.update(&self.signature);
        h.finalize().into()
    }

    pub fn decoded(&self) -> Result<Payload> {
        Payload::decode(self.record_type, &self.payload)
    }

    /// Canonical binary form of the whole record.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Enc::default().u64(self.index).0;
        out.extend_from_slice(&self.prev_hash);
        let mut out = Enc(out)
            .u8(self.record_type.tag())
            .bytes(&self.payload)
            .u32(self.author.0)
            .bytes(&self.signature)
            .0;
        out.extend_from_slice(&self.this_hash);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut d = Dec::new(bytes);
        let index = d.u64()?;
        let prev_hash = d.digest()?;
        let at = d.pos;
        let record_type =
            RecordType::from_tag(d.u8()?).ok_or_else(|| Error::malformed(at, "unknown record type"))?;
        let payload = d.bytes()?.to_vec();
        let author = NodeId(d.u32()?);
        let signature = d.bytes()?.to_vec();
        let this_hash = d.digest()?;
        d.finish()?;
        Ok(Self {
            index,
            prev_hash,
            record_type,
            payload,
            author,
            signature,
            this_hash,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RecordJson {
    index: u64,
    prev_hash: String,
    record_type: RecordType,
    payload: String,
    author: NodeId,
    signature: String,
    this_hash: String,
}

fn hex32(s: &str, line: usize) -> Result<Digest32> {
    let v = hex::decode(s).map_err(|e| Error::BadRow {
        row: line,
        reason: e.to_string(),
    })?;
    v.try_into().map_err(|_| Error::BadRow {
        row: line,
        reason: "expected a 32-byte hash".into(),
    })
}

impl RecordJson {
    fn from_record(r: &LedgerRecord) -> Self {
        Self {
            index: r.index,
            prev_hash: hex::encode(r.prev_hash),
            record_type: r.record_type,
            payload: hex::encode(&r.payload),
            author: r.author,
            signature: hex::encode(&r.signature),
            this_hash: hex::encode(r.this_hash),
        }
    }

    fn into_record(self, line: usize) -> Result<LedgerRecord> {
        let bytes = |s: &str| {
            hex::decode(s).map_err(|e| Error::BadRow {
                row: line,
                reason: e.to_string(),
            })
        };
        Ok(LedgerRecord {
            index: self.index,
            prev_hash: hex32(&self.prev_hash, line)?,
            record_type: self.record_type,
            payload: bytes(&self.payload)?,
            author: self.author,
            signature: bytes(&self.signature)?,
            this_hash: hex32(&self.this_hash, line)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ProcessState {
    consortium: BTreeSet<NodeId>,
    current_iteration: u32,
    status: ProcessStatus,
}

/// Key registry and process table reconstructed by replaying records.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LedgerState {
    scheme: Option<String>,
    authority: Option<NodeId>,
    keys: BTreeMap<NodeId, [u8; 32]>,
    images: BTreeSet<Digest32>,
    processes: BTreeMap<String, ProcessState>,
}

impl LedgerState {
    pub fn public_key(&self, node: NodeId) -> Option<&[u8; 32]> {
        self.keys.get(&node)
    }

    pub fn authority(&self) -> Option<NodeId> {
        self.authority
    }

    pub fn scheme(&self) -> Option<&str> {
        self.scheme.as_deref()
    }

    pub fn process_status(&self, process_id: &str) -> Option<ProcessStatus> {
        self.processes.get(process_id).map(|p| p.status)
    }

    /// Checks `record` against the state and applies it. The hash chain is
    /// checked by the caller.
    fn apply(&mut self, record: &LedgerRecord) -> Result<()> {
        let reject = |msg: String| Err(Error::LedgerRejected(msg));
        let payload = record.decoded()?;
        let msg = signing_message(record.record_type, record.author, &record.payload);

        if let Payload::Genesis(g) = &payload {
            if record.index != 0 || self.authority.is_some() {
                return reject("genesis must be the first record".into());
            }
            if g.authority != record.author {
                return reject("genesis author differs from declared authority".into());
            }
            if g.scheme != SIGNATURE_SCHEME {
                return reject(format!("unsupported signature scheme {}", g.scheme));
            }
            if !verify_signature(&g.authority_key, &msg, &record.signature) {
                return reject("genesis signature invalid".into());
            }
            self.scheme = Some(g.scheme.clone());
            self.authority = Some(g.authority);
            self.keys.insert(g.authority, g.authority_key);
            return Ok(());
        }

        let Some(key) = self.keys.get(&record.author) else {
            return reject(format!("author {} has no registered key", record.author));
        };
        if !verify_signature(key, &msg, &record.signature) {
            return reject(format!("signature of {} does not verify", record.author));
        }

        match payload {
            Payload::Genesis(_) => unreachable!(),
            Payload::Image(img) => {
                self.images.insert(img.artifact_digest);
            }
            Payload::Process(p) => {
                if Some(record.author) != self.authority {
                    return reject("process records are written by the authority".into());
                }
                let members: BTreeSet<NodeId> = p.consortium.iter().map(|(n, _)| *n).collect();
                match self.processes.get(&p.process_id) {
                    None => {
                        if p.status != ProcessStatus::Running {
                            return reject("a new process must start running".into());
                        }
                        if !self.images.contains(&p.algorithm_digest) {
                            return reject("process references an unregistered image".into());
                        }
                        if members.len() != p.consortium.len() {
                            return reject("duplicate consortium member".into());
                        }
                        for (node, k) in &p.consortium {
                            if let Some(existing) = self.keys.get(node) {
                                if existing != k {
                                    return reject(format!("{node} already registered with another key"));
                                }
                            }
                        }
                        for (node, k) in &p.consortium {
                            self.keys.insert(*node, *k);
                        }
                    }
                    Some(prev) => {
                        if prev.status == ProcessStatus::Completed {
                            return reject(format!("process {} already completed", p.process_id));
                        }
                        if prev.consortium != members {
                            return reject("consortium cannot change".into());
                        }
                        if p.current_iteration < prev.current_iteration {
                            return reject("iteration counter went backwards".into());
                        }
                    }
                }
                self.processes.insert(
                    p.process_id,
                    ProcessState {
                        consortium: members,
                        current_iteration: p.current_iteration,
                        status: p.status,
                    },
                );
            }
            Payload::Execution(x) => {
                let Some(proc) = self.processes.get(&x.process_id) else {
                    return reject(format!("unknown process {}", x.process_id));
                };
                if proc.status != ProcessStatus::Running {
                    return reject(format!("process {} is not running", x.process_id));
                }
                if !proc.consortium.contains(&record.author) {
                    return reject(format!("{} is not in the consortium", record.author));
                }
            }
            Payload::Model(m) => {
                let Some(proc) = self.processes.get(&m.process_id) else {
                    return reject(format!("unknown process {}", m.process_id));
                };
                if !proc.consortium.contains(&record.author) {
                    return reject(format!("{} is not in the consortium", record.author));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Ok,
    Bad { index: usize, reason: String },
}

impl Verdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, Verdict::Ok)
    }

    pub fn first_bad(&self) -> Option<usize> {
        match self {
            Verdict::Ok => None,
            Verdict::Bad { index, .. } => Some(*index),
        }
    }
}

/// Replays `records` from scratch: index contiguity, hash links, record
/// hashes, payload decoding, signatures, and state transitions.
pub fn verify_chain(records: &[LedgerRecord]) -> Verdict {
    let mut state = LedgerState::default();
    let mut prev = [0u8; 32];
    for (i, r) in records.iter().enumerate() {
        let bad = |reason: String| Verdict::Bad { index: i, reason };
        if r.index != i as u64 {
            return bad(format!("index {} where {i} expected", r.index));
        }
        if r.prev_hash != prev {
            return bad("prev_hash does not match predecessor".into());
        }
        if r.compute_hash() != r.this_hash {
            return bad("record hash mismatch".into());
        }
        if let Err(e) = state.apply(r) {
            return bad(e.to_string());
        }
        prev = r.this_hash;
    }
    Verdict::Ok
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuditFilter {
    /// Image, execution, or model records carrying this digest.
    Artifact(Digest32),
    Process(String),
    Author(NodeId),
    Round(u32),
    Type(RecordType),
}

#[derive(Debug, Clone, Default)]
pub struct Ledger {
    records: Vec<LedgerRecord>,
    state: LedgerState,
}

impl Ledger {
    /// A ledger with no records at all.
    pub fn empty() -> Self {
        Self::default()
    }

    /// Starts a chain whose genesis declares the authority and signature scheme.
    pub fn genesis(authority: NodeId, key: &KeyPair) -> Result<Self> {
        let mut ledger = Self::empty();
        ledger.append_signed(
            Payload::Genesis(GenesisPayload {
                scheme: SIGNATURE_SCHEME.into(),
                authority,
                authority_key: key.public(),
            }),
            authority,
            key,
        )?;
        Ok(ledger)
    }

    pub fn records(&self) -> &[LedgerRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn state(&self) -> &LedgerState {
        &self.state
    }

    pub fn head_hash(&self) -> Digest32 {
        self.records.last().map_or([0u8; 32], |r| r.this_hash)
    }

    /// Appends a record built from an already-signed payload. Nothing is
    /// appended unless every check passes.
    pub fn submit(
        &mut self,
        record_type: RecordType,
        payload: Vec<u8>,
        author: NodeId,
        signature: Vec<u8>,
    ) -> Result<&LedgerRecord> {
        let mut record = LedgerRecord {
            index: self.records.len() as u64,
            prev_hash: self.head_hash(),
            record_type,
            payload,
            author,
            signature,
            this_hash: [0u8; 32],
        };
        record.this_hash = record.compute_hash();
        let mut next = self.state.clone();
        next.apply(&record)?;
        self.state = next;
        self.records.push(record);
        Ok(self.records.last().unwrap())
    }

    fn append_signed(&mut self, payload: Payload, author: NodeId, key: &KeyPair) -> Result<&LedgerRecord> {
        let record_type = payload.record_type();
        let bytes = payload.encode();
        let signature = key.sign(&signing_message(record_type, author, &bytes));
        self.submit(record_type, bytes, author, signature)
    }

    /// Records the SHA-256 digest of an algorithm artifact.
    pub fn register_image(&mut self, name: &str, artifact: &[u8], author: NodeId, key: &KeyPair) -> Result<&LedgerRecord> {
        self.append_signed(
            Payload::Image(ImagePayload {
                name: name.into(),
                artifact_digest: sha256(artifact),
            }),
            author,
            key,
        )
    }

    pub fn create_process(&mut self, process: ProcessRecord, key: &KeyPair) -> Result<&LedgerRecord> {
        let author = self
            .state
            .authority
            .ok_or_else(|| Error::LedgerRejected("ledger has no genesis".into()))?;
        self.append_signed(Payload::Process(process), author, key)
    }

    /// Writes a new version of an existing process record.
    pub fn update_process(
        &mut self,
        process_id: &str,
        current_iteration: u32,
        status: ProcessStatus,
        key: &KeyPair,
    ) -> Result<&LedgerRecord> {
        let latest = self
            .latest_process(process_id)
            .ok_or_else(|| Error::LedgerRejected(format!("unknown process {process_id}")))?;
        let record = ProcessRecord {
            current_iteration,
            status,
            ..latest
        };
        self.create_process(record, key)
    }

    pub fn latest_process(&self, process_id: &str) -> Option<ProcessRecord> {
        self.records.iter().rev().find_map(|r| match r.decoded() {
            Ok(Payload::Process(p)) if p.process_id == process_id => Some(p),
            _ => None,
        })
    }

    /// Signs and appends an execution result after verifying the signature
    /// against the author's registered key.
    pub fn append_execution_record(
        &mut self,
        process_id: &str,
        round: u32,
        kind: ExecutionKind,
        author: NodeId,
        payload_digest: Digest32,
        key: &KeyPair,
    ) -> Result<&LedgerRecord> {
        self.append_signed(
            Payload::Execution(ExecutionPayload {
                process_id: process_id.into(),
                round,
                kind,
                payload_digest,
            }),
            author,
            key,
        )
    }

    pub fn publish_model(
        &mut self,
        process_id: &str,
        model_digest: Digest32,
        estimator_count: u32,
        access: Vec<NodeId>,
        author: NodeId,
        key: &KeyPair,
    ) -> Result<&LedgerRecord> {
        self.append_signed(
            Payload::Model(ModelPayload {
                process_id: process_id.into(),
                model_digest,
                estimator_count,
                access,
            }),
            author,
            key,
        )
    }

    pub fn verify(&self) -> Verdict {
        verify_chain(&self.records)
    }

    pub fn audit_query(&self, filter: &AuditFilter) -> Vec<&LedgerRecord> {
        self.records.iter().filter(|r| matches_filter(r, filter)).collect()
    }

    /// Execution records whose payload digest appears more than once, as
    /// `(digest, record indices)`.
    pub fn duplicate_digests(&self) -> Vec<(Digest32, Vec<u64>)> {
        let mut seen: BTreeMap<Digest32, Vec<u64>> = BTreeMap::new();
        for r in &self.records {
            if let Ok(Payload::Execution(x)) = r.decoded() {
                seen.entry(x.payload_digest).or_default().push(r.index);
            }
        }
        seen.into_iter().filter(|(_, v)| v.len() > 1).collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, &RecordJson::from_record(r))?;
            out.write_all(b"\n").map_err(|e| Error::io("<ledger>", e))?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads records without validating them; see [`verify_chain`].
    pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<LedgerRecord>> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let json: RecordJson = serde_json::from_str(&line)?;
            records.push(json.into_record(i)?);
        }
        Ok(records)
    }

    /// Loads a persisted chain, rejecting it unless it verifies.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let records = Self::read_records(path)?;
        let mut ledger = Self::empty();
        for r in records {
            let index = r.index;
            let submitted = ledger.submit(r.record_type, r.payload, r.author, r.signature)?;
            if submitted.this_hash != r.this_hash {
                return Err(Error::LedgerRejected(format!("record {index} hash mismatch")));
            }
        }
        Ok(ledger)
    }
}

fn matches_filter(r: &LedgerRecord, filter: &AuditFilter) -> bool {
    match filter {
        AuditFilter::Author(a) => r.author == *a,
        AuditFilter::Type(t) => r.record_type == *t,
        other => {
            let Ok(payload) = r.decoded() else { return false };
            match (other, payload) {
                (AuditFilter::Artifact(d), Payload::Image(p)) => p.artifact_digest == *d,
                (AuditFilter::Artifact(d), Payload::Execution(p)) => p.payload_digest == *d,
                (AuditFilter::Artifact(d), Payload::Model(p)) => p.model_digest == *d,
                (AuditFilter::Process(id), Payload::Process(p)) => p.process_id == *id,
                (AuditFilter::Process(id), Payload::Execution(p)) => p.process_id == *id,
                (AuditFilter::Process(id), Payload::Model(p)) => p.process_id == *id,
                (AuditFilter::Round(n), Payload::Execution(p)) => p.round == *n,
                _ => false,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const AUTH: NodeId = NodeId(1000);

    fn setup() -> (Ledger, KeyPair, Vec<KeyPair>) {
        let auth = KeyPair::derive(1, AUTH);
        let members: Vec<KeyPair> = (0..3).map(|i| KeyPair::derive(1, NodeId(i))).collect();
        let mut ledger = Ledger::genesis(AUTH, &auth).unwrap();
        ledger.register_image("algo", b"config", AUTH, &auth).unwrap();
        ledger
            .create_process(
                ProcessRecord {
                    process_id: "p1".into(),
                    algorithm_digest: sha256(b"config"),
                    consortium: members.iter().enumerate().map(|(i, k)| (NodeId(i as u32), k.public())).collect(),
                    current_iteration: 0,
                    status: ProcessStatus::Running,
                },
                &auth,
            )
            .unwrap();
        (ledger, auth, members)
    }

    #[test]
    fn empty_artifact_digest_is_well_known() {
        assert_eq!(
            hex::encode(sha256(b"")),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn same_artifact_twice() {
        let (mut ledger, auth, _) = setup();
        let a = ledger.register_image("algo", b"x", AUTH, &auth).unwrap().clone();
        let b = ledger.register_image("algo", b"x", AUTH, &auth).unwrap().clone();
        assert_eq!(a.payload, b.payload);
        assert_ne!(a.index, b.index);
        assert_ne!(a.this_hash, b.this_hash);
    }

    #[test]
    fn execution_accepted_and_wrong_key_rejected() {
        let (mut ledger, _, members) = setup();
        let before = ledger.len();
        ledger
            .append_execution_record("p1", 1, ExecutionKind::Fit, NodeId(0), sha256(b"t"), &members[0])
            .unwrap();
        assert_eq!(ledger.len(), before + 1);
        let err = ledger.append_execution_record("p1", 1, ExecutionKind::Fit, NodeId(0), sha256(b"t"), &members[1]);
        assert!(matches!(err, Err(Error::LedgerRejected(_))));
        assert_eq!(ledger.len(), before + 1);
        assert!(ledger
            .append_execution_record("nope", 1, ExecutionKind::Fit, NodeId(0), sha256(b"t"), &members[0])
            .is_err());
        let outsider = KeyPair::derive(1, NodeId(77));
        assert!(ledger
            .append_execution_record("p1", 1, ExecutionKind::Fit, NodeId(77), sha256(b"t"), &outsider)
            .is_err());
    }

    #[test]
    fn process_lifecycle() {
        let (mut ledger, auth, members) = setup();
        ledger.update_process("p1", 2, ProcessStatus::Running, &auth).unwrap();
        assert!(ledger.update_process("p1", 1, ProcessStatus::Running, &auth).is_err());
        ledger.update_process("p1", 4, ProcessStatus::Completed, &auth).unwrap();
        assert!(ledger.update_process("p1", 4, ProcessStatus::Running, &auth).is_err());
        assert!(ledger
            .append_execution_record("p1", 5, ExecutionKind::Fit, NodeId(0), sha256(b"t"), &members[0])
            .is_err());
        ledger
            .publish_model("p1", sha256(b"m"), 3, vec![NodeId(0)], NodeId(0), &members[0])
            .unwrap();
        assert_eq!(ledger.state().process_status("p1"), Some(ProcessStatus::Completed));
        assert!(ledger.verify().is_ok());
    }

    #[test]
    fn empty_and_untouched_chains_verify() {
        assert!(verify_chain(&[]).is_ok());
        let (ledger, _, _) = setup();
        assert!(ledger.verify().is_ok());
    }

    #[test]
    fn replay_is_accepted_but_flagged() {
        let (mut ledger, _, members) = setup();
        let d = sha256(b"share");
        let first = ledger
            .append_execution_record("p1", 1, ExecutionKind::Share, NodeId(1), d, &members[1])
            .unwrap()
            .clone();
        ledger
            .append_execution_record("p1", 1, ExecutionKind::Fit, NodeId(2), sha256(b"other"), &members[2])
            .unwrap();
        ledger
            .submit(first.record_type, first.payload.clone(), first.author, first.signature.clone())
            .unwrap();
        assert!(ledger.verify().is_ok());
        let dups = ledger.duplicate_digests();
        assert_eq!(dups.len(), 1);
        assert_eq!(dups[0].0, d);
        assert_eq!(dups[0].1.len(), 2);
    }

    #[test]
    fn audit_filters() {
        let (mut ledger, _, members) = setup();
        for round in 1..=3 {
            ledger
                .append_execution_record("p1", round, ExecutionKind::Fit, NodeId(2), sha256(&[round as u8]), &members[2])
                .unwrap();
        }
        let by_author = ledger.audit_query(&AuditFilter::Author(NodeId(2)));
        assert_eq!(by_author.len(), 3);
        assert!(by_author.windows(2).all(|w| w[0].index < w[1].index));
        assert!(ledger.audit_query(&AuditFilter::Process("ghost".into())).is_empty());
        assert_eq!(ledger.audit_query(&AuditFilter::Round(2)).len(), 1);
        assert_eq!(ledger.audit_query(&AuditFilter::Artifact(sha256(b"config"))).len(), 1);
    }

    #[test]
    fn jsonl_round_trip() {
        let (ledger, _, _) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        ledger.save(&path).unwrap();
        let back = Ledger::load(&path).unwrap();
        assert_eq!(back.records(), ledger.records());
    }

    #[test]
    fn record_binary_round_trip() {
        let (ledger, _, _) = setup();
        for r in ledger.records() {
            assert_eq!(&LedgerRecord::decode(&r.encode()).unwrap(), r);
        }
    }
}
