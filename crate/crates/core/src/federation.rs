//! Decentralized training: agents, registries, topologies, and the
//! FIT / SHARE / GET operations.
//!
//! Agents never exchange examples. The only inter-agent message is a
//! [`SharePayload`]: a signed list of canonical tree encodings written into a
//! neighbour's registry slot, overwriting whatever that sender wrote before.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::Write;

use log::{info, warn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{build_central_test, LabeledDataset, NodeDataset};
use crate::ensemble::{Ensemble, PredictionMode, Ranker};
use crate::error::{Error, Result};
use crate::eval::{confusion, ConfusionCounts};
use crate::ledger::{sha256, Digest32, ExecutionKind, KeyPair, Ledger, ProcessRecord, ProcessStatus};
use crate::seeding::{derive_seed, rng_from};
use crate::tree::{deserialize_tree, fit_tree, serialize_tree, DecisionTree, EstimatorId, NodeId, TreeTrainConfig};

/// Author id of the process orchestrator on the ledger.
pub const ORCHESTRATOR: NodeId = NodeId(u32::MAX);

pub type Edge = (NodeId, NodeId);

fn edge(a: NodeId, b: NodeId) -> Edge {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Undirected connection graph, possibly changing per round. Round `r`
/// (1-based) uses `schedule[r - 1]`; rounds past the end reuse the last entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    nodes: Vec<NodeId>,
    schedule: Vec<BTreeSet<Edge>>,
}

impl Topology {
    pub fn from_edges(nodes: Vec<NodeId>, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        Self::time_varying(nodes, vec![edges.into_iter().collect()])
    }

    pub fn time_varying(mut nodes: Vec<NodeId>, schedule: Vec<Vec<Edge>>) -> Result<Self> {
        nodes.sort_unstable();
        nodes.dedup();
        if schedule.is_empty() {
            return Err(Error::Config("topology needs at least one edge set".into()));
        }
        let known: BTreeSet<NodeId> = nodes.iter().copied().collect();
        let mut normalized = Vec::with_capacity(schedule.len());
        for edges in schedule {
            let mut set = BTreeSet::new();
            for (a, b) in edges {
                if a == b {
                    return Err(Error::Config(format!("self-loop at {a}")));
                }
                if !known.contains(&a) || !known.contains(&b) {
                    return Err(Error::Config(format!("edge ({a}, {b}) names an unknown node")));
                }
                set.insert(edge(a, b));
            }
            normalized.push(set);
        }
        Ok(Self {
            nodes,
            schedule: normalized,
        })
    }

    fn ids(n: usize) -> Vec<NodeId> {
        (0..n as u32).map(NodeId).collect()
    }

    pub fn disconnected(n: usize) -> Self {
        Self::from_edges(Self::ids(n), []).unwrap()
    }

    /// Each node linked to its two cyclic neighbours.
    pub fn ring(n: usize) -> Self {
        let ids = Self::ids(n);
        let edges: Vec<Edge> = if n < 2 {
            Vec::new()
        } else {
            (0..n).map(|i| (ids[i], ids[(i + 1) % n])).filter(|(a, b)| a != b).collect()
        };
        Self::from_edges(ids, edges).unwrap()
    }

    pub fn complete(n: usize) -> Self {
        let ids = Self::ids(n);
        let edges: Vec<Edge> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (NodeId(i as u32), NodeId(j as u32)))).collect();
        Self::from_edges(ids, edges).unwrap()
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn edges_at(&self, round: u32) -> &BTreeSet<Edge> {
        let i = (round.max(1) as usize - 1).min(self.schedule.len() - 1);
        &self.schedule[i]
    }

    pub fn neighbors(&self, node: NodeId, round: u32) -> Vec<NodeId> {
        self.edges_at(round)
            .iter()
            .filter_map(|&(a, b)| {
                if a == node {
                    Some(b)
                } else if b == node {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }

    /// Hop distance between every pair at `round`; `None` when unreachable.
    pub fn hop_distances(&self, round: u32) -> BTreeMap<(NodeId, NodeId), Option<usize>> {
        let mut out = BTreeMap::new();
        for &src in &self.nodes {
            let mut dist: BTreeMap<NodeId, usize> = BTreeMap::new();
            dist.insert(src, 0);
            let mut queue = VecDeque::from([src]);
            while let Some(u) = queue.pop_front() {
                let du = dist[&u];
                for v in self.neighbors(u, round) {
                    if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(v) {
                        e.insert(du + 1);
                        queue.push_back(v);
                    }
                }
            }
            for &dst in &self.nodes {
                out.insert((src, dst), dist.get(&dst).copied());
            }
        }
        out
    }
}

/// Named topology or explicit edge list, as written in run configs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologySpec {
    Disconnected,
    Ring,
    Complete,
    Edges(Vec<(u32, u32)>),
    /// One edge list per round.
    Schedule(Vec<Vec<(u32, u32)>>),
}

impl TopologySpec {
    pub fn parse_preset(name: &str) -> Result<Self> {
        match name {
            "disconnected" => Ok(TopologySpec::Disconnected),
            "ring" => Ok(TopologySpec::Ring),
            "complete" => Ok(TopologySpec::Complete),
            other => Err(Error::Config(format!("unknown topology preset `{other}`"))),
        }
    }

    pub fn build(&self, n: usize) -> Result<Topology> {
        let conv = |edges: &[(u32, u32)]| edges.iter().map(|&(a, b)| (NodeId(a), NodeId(b))).collect::<Vec<_>>();
        Ok(match self {
            TopologySpec::Disconnected => Topology::disconnected(n),
            TopologySpec::Ring => Topology::ring(n),
            TopologySpec::Complete => Topology::complete(n),
            TopologySpec::Edges(e) => Topology::from_edges(Topology::ids(n), conv(e))?,
            TopologySpec::Schedule(s) => Topology::time_varying(Topology::ids(n), s.iter().map(|e| conv(e)).collect())?,
        })
    }
}

/// A SHARE message: canonical tree encodings plus the sender's signature
/// over their digest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharePayload {
    pub sender: NodeId,
    pub round: u32,
    pub trees: Vec<Vec<u8>>,
    pub digest: Digest32,
    pub signature: Vec<u8>,
}

/// Digest binding a batch of encoded trees to its sender, round, and purpose.
pub fn batch_digest(sender: NodeId, round: u32, kind: ExecutionKind, trees: &[Vec<u8>]) -> Digest32 {
    let mut buf = Vec::new();
    buf.extend_from_slice(b"fedforest.batch");
    buf.extend_from_slice(&sender.0.to_le_bytes());
    buf.extend_from_slice(&round.to_le_bytes());
    buf.push(kind as u8);
    buf.extend_from_slice(&(trees.len() as u32).to_le_bytes());
    for t in trees {
        buf.extend_from_slice(&(t.len() as u32).to_le_bytes());
        buf.extend_from_slice(t);
    }
    sha256(&buf)
}

fn share_message(sender: NodeId, round: u32, digest: &Digest32) -> Vec<u8> {
    let mut msg = b"fedforest.share".to_vec();
    msg.extend_from_slice(&sender.0.to_le_bytes());
    msg.extend_from_slice(&round.to_le_bytes());
    msg.extend_from_slice(digest);
    msg
}

impl SharePayload {
    pub fn new(sender: NodeId, round: u32, trees: Vec<Vec<u8>>, key: &KeyPair) -> Self {
        let digest = batch_digest(sender, round, ExecutionKind::Share, &trees);
        let signature = key.sign(&share_message(sender, round, &digest));
        Self {
            sender,
            round,
            trees,
            digest,
            signature,
        }
    }

    /// Recomputes the digest and checks the signature with `public`.
    pub fn verify(&self, public: &[u8; 32]) -> bool {
        batch_digest(self.sender, self.round, ExecutionKind::Share, &self.trees) == self.digest
            && crate::ledger::verify_signature(public, &share_message(self.sender, self.round, &self.digest), &self.signature)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistrySlot {
    pub payload: SharePayload,
    pub read: bool,
}

/// One last-writer-wins slot per sending neighbour.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Registry {
    slots: BTreeMap<NodeId, RegistrySlot>,
}

impl Registry {
    pub fn write(&mut self, payload: SharePayload) {
        self.slots.insert(payload.sender, RegistrySlot { payload, read: false });
    }

    pub fn slot(&self, sender: NodeId) -> Option<&RegistrySlot> {
        self.slots.get(&sender)
    }

    pub fn slot_mut(&mut self, sender: NodeId) -> Option<&mut RegistrySlot> {
        self.slots.get_mut(&sender)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn total_trees(&self) -> usize {
        self.slots.values().map(|s| s.payload.trees.len()).sum()
    }

    fn take_unread(&mut self) -> Vec<SharePayload> {
        self.slots
            .values_mut()
            .filter(|s| !s.read)
            .map(|s| {
                s.read = true;
                s.payload.clone()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    /// Every round: all FIT, then all SHARE, then all GET.
    #[default]
    Synchronous,
    /// Each agent runs FIT, SHARE, GET at its own random times within a
    /// round; operations of different agents interleave.
    EventList,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub n_new: usize,
    pub n_max: usize,
    pub n_share: usize,
    pub rounds: u32,
    pub topology: Topology,
    pub tree_cfg: TreeTrainConfig,
    pub ranker: Ranker,
    pub prediction_mode: PredictionMode,
    pub scheduler: Scheduler,
    pub seed: u64,
}

impl FederationConfig {
    /// `n_new = 10, n_share = 10, n_max = 50`, four rounds.
    pub fn with_defaults(topology: Topology, seed: u64) -> Self {
        Self {
            n_new: 10,
            n_max: 50,
            n_share: 10,
            rounds: 4,
            topology,
            tree_cfg: TreeTrainConfig::default(),
            ranker: Ranker::default(),
            prediction_mode: PredictionMode::Average,
            scheduler: Scheduler::Synchronous,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_new == 0 || self.n_max == 0 || self.n_share == 0 || self.rounds == 0 {
            return Err(Error::Config("n_new, n_max, n_share and rounds must be positive".into()));
        }
        if self.n_share > self.n_max {
            return Err(Error::Config(format!("n_share {} exceeds n_max {}", self.n_share, self.n_max)));
        }
        Ok(())
    }

    /// Bytes standing in for the algorithm image on the ledger.
    pub fn artifact_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("config serializes")
    }
}

/// Ledger context shared by the agents of one learning process.
pub struct ProcessContext<'a> {
    pub ledger: &'a mut Ledger,
    pub process_id: &'a str,
}

pub struct AgentState {
    pub node_id: NodeId,
    pub dataset: NodeDataset,
    pub ensemble: Ensemble,
    pub next_counter: u64,
    pub registry: Registry,
    key: KeyPair,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GetIncident {
    BadSignature { sender: NodeId },
    UnknownSender { sender: NodeId },
    BadTree { sender: NodeId, reason: String },
    TooManyTrees { sender: NodeId, count: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GetOutcome {
    pub received: usize,
    pub added: usize,
    pub incidents: Vec<GetIncident>,
}

impl AgentState {
    pub fn new(dataset: NodeDataset, key: KeyPair, n_max: usize) -> Self {
        Self {
            node_id: dataset.node_id,
            dataset,
            ensemble: Ensemble::with_capacity_hint(n_max),
            next_counter: 0,
            registry: Registry::default(),
            key,
        }
    }

    pub fn public_key(&self) -> [u8; 32] {
        self.key.public()
    }

    /// Trains `n_new` trees on the local train split, adds them, and crops
    /// to `n_max`. Returns the new trees' ids (empty when the split is empty).
    pub fn op_fit(&mut self, cfg: &FederationConfig, round: u32, ctx: &mut ProcessContext<'_>) -> Result<Vec<EstimatorId>> {
        if self.dataset.train.is_empty() {
            warn!("{} has no training data; skipping FIT", self.node_id);
            return Ok(Vec::new());
        }
        let trees = self.train_batch(cfg, round)?;
        let ids: Vec<EstimatorId> = trees.iter().map(|t| t.id).collect();
        let encoded: Vec<Vec<u8>> = trees.iter().map(serialize_tree).collect();
        self.next_counter += cfg.n_new as u64;
        self.ensemble.add(trees);
        if self.ensemble.len() > cfg.n_max {
            self.ensemble.crop(cfg.n_max, &cfg.ranker)?;
        }
        let digest = batch_digest(self.node_id, round, ExecutionKind::Fit, &encoded);
        ctx.ledger
            .append_execution_record(ctx.process_id, round, ExecutionKind::Fit, self.node_id, digest, &self.key)?;
        Ok(ids)
    }

    fn train_batch(&self, cfg: &FederationConfig, round: u32) -> Result<Vec<DecisionTree>> {
        (0..cfg.n_new)
            .into_par_iter()
            .map(|t| {
                let tree_cfg = TreeTrainConfig {
                    seed: derive_seed(cfg.seed, &[self.node_id.0 as u64, round as u64, t as u64]),
                    ..cfg.tree_cfg
                };
                let id = EstimatorId::new(self.node_id, self.next_counter + t as u64);
                fit_tree(&self.dataset.train, &tree_cfg, id)
            })
            .collect()
    }

    /// Builds the payload of this agent's top `n_share` trees for every
    /// neighbour. With no neighbours (or nothing to share) nothing is written
    /// and nothing is recorded.
    pub fn op_share(
        &mut self,
        neighbors: &[NodeId],
        cfg: &FederationConfig,
        round: u32,
        ctx: &mut ProcessContext<'_>,
    ) -> Result<Vec<(NodeId, SharePayload)>> {
        if neighbors.is_empty() || self.ensemble.is_empty() {
            return Ok(Vec::new());
        }
        let top = self.ensemble.get_top(cfg.n_share, &cfg.ranker)?;
        let payload = SharePayload::new(self.node_id, round, top.iter().map(serialize_tree).collect(), &self.key);
        ctx.ledger.append_execution_record(
            ctx.process_id,
            round,
            ExecutionKind::Share,
            self.node_id,
            payload.digest,
            &self.key,
        )?;
        Ok(neighbors.iter().map(|&n| (n, payload.clone())).collect())
    }

    /// Absorbs every unread registry slot. Payloads failing verification are
    /// dropped and logged to the ledger as incidents.
    pub fn op_get(&mut self, cfg: &FederationConfig, round: u32, ctx: &mut ProcessContext<'_>) -> Result<GetOutcome> {
        let mut outcome = GetOutcome::default();
        let mut incoming = Vec::new();
        for payload in self.registry.take_unread() {
            let sender = payload.sender;
            let incident = match ctx.ledger.state().public_key(sender) {
                None => Some(GetIncident::UnknownSender { sender }),
                Some(k) if !payload.verify(k) => Some(GetIncident::BadSignature { sender }),
                Some(_) if payload.trees.len() > cfg.n_share => Some(GetIncident::TooManyTrees {
                    sender,
                    count: payload.trees.len(),
                }),
                Some(_) => None,
            };
            let decoded = match incident {
                Some(i) => Err(i),
                None => payload
                    .trees
                    .iter()
                    .map(|b| deserialize_tree(b))
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| GetIncident::BadTree {
                        sender,
                        reason: e.to_string(),
                    }),
            };
            match decoded {
                Ok(trees) => {
                    outcome.received += trees.len();
                    incoming.extend(trees);
                }
                Err(incident) => {
                    warn!("{} discarded payload from {sender}: {incident:?}", self.node_id);
                    ctx.ledger.append_execution_record(
                        ctx.process_id,
                        round,
                        ExecutionKind::Incident,
                        self.node_id,
                        payload.digest,
                        &self.key,
                    )?;
                    outcome.incidents.push(incident);
                }
            }
        }
        outcome.added = self.ensemble.add(incoming);
        if self.ensemble.len() > cfg.n_max {
            self.ensemble.crop(cfg.n_max, &cfg.ranker)?;
        }
        Ok(outcome)
    }

    pub fn evaluate(&self, data: &LabeledDataset, mode: PredictionMode) -> Result<ConfusionCounts> {
        if self.ensemble.is_empty() {
            return confusion(&vec![0.0; data.len()], data.labels());
        }
        let scores = self.ensemble.predict_batch(data.rows(), mode)?;
        confusion(&scores, data.labels())
    }
}

/// State of one agent at the end of a round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub round: u32,
    pub node: NodeId,
    pub ensemble: Vec<EstimatorId>,
    /// Confusion counts on the joined test set.
    pub test_confusion: ConfusionCounts,
    /// Confusion counts on the node's own train split.
    pub train_confusion: ConfusionCounts,
    pub registry_trees: usize,
}

pub fn write_snapshots<W: Write>(snapshots: &[Snapshot], mut out: W) -> Result<()> {
    for s in snapshots {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n").map_err(|e| Error::io("<snapshots>", e))?;
    }
    Ok(())
}

pub fn read_snapshots(path: impl AsRef<std::path::Path>) -> Result<Vec<Snapshot>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Fit,
    Share,
    Get,
}

/// Handed to the observer after every phase (synchronous scheduler) or
/// every single operation (event-list scheduler).
pub struct PhaseEvent<'a> {
    pub round: u32,
    pub phase: Phase,
    pub agents: &'a [AgentState],
}

pub struct RunOutput {
    pub snapshots: Vec<Snapshot>,
    pub ledger: Ledger,
    pub agents: Vec<AgentState>,
    pub process_id: String,
}

pub fn run_experiment(nodes: &[NodeDataset], cfg: &FederationConfig) -> Result<RunOutput> {
    run_experiment_with(nodes, cfg, |_| {})
}

pub fn run_experiment_with(
    nodes: &[NodeDataset],
    cfg: &FederationConfig,
    mut observer: impl FnMut(PhaseEvent<'_>),
) -> Result<RunOutput> {
    cfg.validate()?;
    let data_ids: BTreeSet<NodeId> = nodes.iter().map(|n| n.node_id).collect();
    let topo_ids: BTreeSet<NodeId> = cfg.topology.nodes().iter().copied().collect();
    if data_ids != topo_ids || data_ids.len() != nodes.len() {
        return Err(Error::Config("topology nodes do not match dataset nodes".into()));
    }
    if data_ids.contains(&ORCHESTRATOR) {
        return Err(Error::Config(format!("node id {} is reserved", ORCHESTRATOR.0)));
    }
    if let Some(d) = nodes.first().map(|n| n.train.dim()) {
        cfg.tree_cfg.validate(d)?;
    }
    let central = build_central_test(nodes)?;

    let authority = KeyPair::derive(cfg.seed, ORCHESTRATOR);
    let mut ledger = Ledger::genesis(ORCHESTRATOR, &authority)?;
    let artifact = cfg.artifact_bytes();
    ledger.register_image("fedforest-rf", &artifact, ORCHESTRATOR, &authority)?;
    let process_id = format!("fedforest-{:016x}", derive_seed(cfg.seed, &[0x5052]));

    let mut agents: Vec<AgentState> = nodes
        .iter()
        .map(|n| AgentState::new(n.clone(), KeyPair::derive(cfg.seed, n.node_id), cfg.n_max))
        .collect();
    agents.sort_by_key(|a| a.node_id);
    ledger.create_process(
        ProcessRecord {
            process_id: process_id.clone(),
            algorithm_digest: sha256(&artifact),
            consortium: agents.iter().map(|a| (a.node_id, a.public_key())).collect(),
            current_iteration: 0,
            status: ProcessStatus::Running,
        },
        &authority,
    )?;

    let mut snapshots = Vec::with_capacity(agents.len() * cfg.rounds as usize);
    for round in 1..=cfg.rounds {
        ledger.update_process(&process_id, round, ProcessStatus::Running, &authority)?;
        let mut ctx = ProcessContext {
            ledger: &mut ledger,
            process_id: &process_id,
        };
        match cfg.scheduler {
            Scheduler::Synchronous => run_round_sync(&mut agents, cfg, round, &mut ctx, &mut observer)?,
            Scheduler::EventList => run_round_events(&mut agents, cfg, round, &mut ctx, &mut observer)?,
        }
        snapshots.extend(take_snapshots(&agents, &central, cfg, round)?);
        info!("round {round} complete");
    }

    for a in &agents {
        let model = a.ensemble.to_container(Some(cfg.rounds));
        ledger.publish_model(
            &process_id,
            sha256(&model),
            a.ensemble.len() as u32,
            agents.iter().map(|x| x.node_id).collect(),
            a.node_id,
            &a.key,
        )?;
    }
    ledger.update_process(&process_id, cfg.rounds, ProcessStatus::Completed, &authority)?;

    Ok(RunOutput {
        snapshots,
        ledger,
        agents,
        process_id,
    })
}

fn deliver(agents: &mut [AgentState], writes: Vec<(NodeId, SharePayload)>) {
    for (to, payload) in writes {
        if let Ok(i) = agents.binary_search_by_key(&to, |a| a.node_id) {
            agents[i].registry.write(payload);
        }
    }
}

fn run_round_sync(
    agents: &mut [AgentState],
    cfg: &FederationConfig,
    round: u32,
    ctx: &mut ProcessContext<'_>,
    observer: &mut impl FnMut(PhaseEvent<'_>),
) -> Result<()> {
    for a in agents.iter_mut() {
        a.op_fit(cfg, round, ctx)?;
    }
    observer(PhaseEvent {
        round,
        phase: Phase::Fit,
        agents,
    });

    if !cfg.topology.edges_at(round).is_empty() {
        let mut writes = Vec::new();
        for a in agents.iter_mut() {
            let neighbors = cfg.topology.neighbors(a.node_id, round);
            writes.extend(a.op_share(&neighbors, cfg, round, ctx)?);
        }
        deliver(agents, writes);
        observer(PhaseEvent {
            round,
            phase: Phase::Share,
            agents,
        });

        for a in agents.iter_mut() {
            a.op_get(cfg, round, ctx)?;
        }
        observer(PhaseEvent {
            round,
            phase: Phase::Get,
            agents,
        });
    }
    Ok(())
}

fn run_round_events(
    agents: &mut [AgentState],
    cfg: &FederationConfig,
    round: u32,
    ctx: &mut ProcessContext<'_>,
    observer: &mut impl FnMut(PhaseEvent<'_>),
) -> Result<()> {
    let mut rng = rng_from(cfg.seed, &[0x4556, round as u64]);
    let mut events: Vec<(f64, usize, Phase)> = Vec::with_capacity(agents.len() * 3);
    for i in 0..agents.len() {
        let mut t: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        t.sort_by(f64::total_cmp);
        events.push((t[0], i, Phase::Fit));
        events.push((t[1], i, Phase::Share));
        events.push((t[2], i, Phase::Get));
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for (_, i, phase) in events {
        match phase {
            Phase::Fit => {
                agents[i].op_fit(cfg, round, ctx)?;
            }
            Phase::Share => {
                let neighbors = cfg.topology.neighbors(agents[i].node_id, round);
                let writes = agents[i].op_share(&neighbors, cfg, round, ctx)?;
                deliver(agents, writes);
            }
            Phase::Get => {
                agents[i].op_get(cfg, round, ctx)?;
            }
        }
        observer(PhaseEvent { round, phase, agents });
    }
    Ok(())
}

fn take_snapshots(agents: &[AgentState], central: &LabeledDataset, cfg: &FederationConfig, round: u32) -> Result<Vec<Snapshot>> {
    agents
        .iter()
        .map(|a| {
            Ok(Snapshot {
                round,
                node: a.node_id,
                ensemble: a.ensemble.ids(),
                test_confusion: a.evaluate(central, cfg.prediction_mode)?,
                train_confusion: a.evaluate(&a.dataset.train, cfg.prediction_mode)?,
                registry_trees: a.registry.total_trees(),
            })
        })
        .collect()
}

/// A single agent running only FIT, `cfg.rounds` times, outside any federation.
pub fn standalone_fit(node: &NodeDataset, cfg: &FederationConfig) -> Result<Ensemble> {
    let key = KeyPair::derive(cfg.seed, node.node_id);
    let authority = KeyPair::derive(cfg.seed, ORCHESTRATOR);
    let mut ledger = Ledger::genesis(ORCHESTRATOR, &authority)?;
    ledger.register_image("standalone", b"standalone", ORCHESTRATOR, &authority)?;
    ledger.create_process(
        ProcessRecord {
            process_id: "standalone".into(),
            algorithm_digest: sha256(b"standalone"),
            consortium: vec![(node.node_id, key.public())],
            current_iteration: 0,
            status: ProcessStatus::Running,
        },
        &authority,
    )?;
    let mut agent = AgentState::new(node.clone(), key, cfg.n_max);
    let mut ctx = ProcessContext {
        ledger: &mut ledger,
        process_id: "standalone",
    };
    for round in 1..=cfg.rounds {
        agent.op_fit(cfg, round, &mut ctx)?;
    }
    Ok(agent.ensemble)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{prepare_nodes, synth_generate, PartitionSpec};

    fn small_nodes(n: usize) -> Vec<NodeDataset> {
        let ds = synth_generate(3000, 6, 0.03, 5).unwrap();
        prepare_nodes(
            &ds,
            &PartitionSpec {
                n_parts: n,
                imbalance: 0.5,
                train_fraction: 0.9,
                seed: 5,
            },
        )
        .unwrap()
    }

    fn small_cfg(topology: Topology) -> FederationConfig {
        FederationConfig {
            n_new: 3,
            n_max: 7,
            n_share: 2,
            rounds: 3,
            tree_cfg: TreeTrainConfig {
                max_depth: 4,
                ..TreeTrainConfig::default()
            },
            ..FederationConfig::with_defaults(topology, 11)
        }
    }

    struct Harness {
        ledger: Ledger,
        authority: KeyPair,
        agents: Vec<AgentState>,
    }

    fn harness(nodes: &[NodeDataset], cfg: &FederationConfig) -> Harness {
        let authority = KeyPair::derive(cfg.seed, ORCHESTRATOR);
        let mut ledger = Ledger::genesis(ORCHESTRATOR, &authority).unwrap();
        ledger.register_image("t", b"t", ORCHESTRATOR, &authority).unwrap();
        let agents: Vec<AgentState> = nodes
            .iter()
            .map(|n| AgentState::new(n.clone(), KeyPair::derive(cfg.seed, n.node_id), cfg.n_max))
            .collect();
        ledger
            .create_process(
                ProcessRecord {
                    process_id: "p".into(),
                    algorithm_digest: sha256(b"t"),
                    consortium: agents.iter().map(|a| (a.node_id, a.public_key())).collect(),
                    current_iteration: 0,
                    status: ProcessStatus::Running,
                },
                &authority,
            )
            .unwrap();
        Harness {
            ledger,
            authority,
            agents,
        }
    }

    #[test]
    fn topology_presets() {
        assert!(Topology::disconnected(4).edges_at(1).is_empty());
        let ring = Topology::ring(5);
        assert_eq!(ring.edges_at(1).len(), 5);
        assert!(ring.nodes().iter().all(|&n| ring.neighbors(n, 1).len() == 2));
        assert_eq!(Topology::complete(5).edges_at(3).len(), 10);
        assert_eq!(Topology::ring(2).edges_at(1).len(), 1);
        let d = ring.hop_distances(1);
        assert_eq!(d[&(NodeId(0), NodeId(2))], Some(2));
        assert_eq!(Topology::disconnected(2).hop_distances(1)[&(NodeId(0), NodeId(1))], None);
    }

    #[test]
    fn topology_validation_and_schedule() {
        let ids = vec![NodeId(0), NodeId(1), NodeId(2)];
        assert!(Topology::from_edges(ids.clone(), [(NodeId(1), NodeId(1))]).is_err());
        assert!(Topology::from_edges(ids.clone(), [(NodeId(1), NodeId(9))]).is_err());
        let tv = Topology::time_varying(ids, vec![vec![(NodeId(0), NodeId(1))], vec![(NodeId(2), NodeId(1))]]).unwrap();
        assert_eq!(tv.neighbors(NodeId(0), 1), vec![NodeId(1)]);
        assert!(tv.neighbors(NodeId(0), 2).is_empty());
        assert_eq!(tv.neighbors(NodeId(2), 7), vec![NodeId(1)]);
        let spec: TopologySpec = serde_json::from_str(r#"{"edges": [[0, 1]]}"#).unwrap();
        assert_eq!(spec.build(3).unwrap().edges_at(1).len(), 1);
        let spec: TopologySpec = serde_json::from_str(r#""ring""#).unwrap();
        assert_eq!(spec, TopologySpec::Ring);
    }

    #[test]
    fn fit_issues_progressive_ids_and_crops() {
        let nodes = small_nodes(2);
        let cfg = small_cfg(Topology::disconnected(2));
        let mut h = harness(&nodes, &cfg);
        let mut ctx = ProcessContext {
            ledger: &mut h.ledger,
            process_id: "p",
        };
        let a = &mut h.agents[0];
        let first = a.op_fit(&cfg, 1, &mut ctx).unwrap();
        assert_eq!(first.iter().map(|i| i.counter).collect::<Vec<_>>(), vec![0, 1, 2]);
        let second = a.op_fit(&cfg, 2, &mut ctx).unwrap();
        assert_eq!(second.iter().map(|i| i.counter).collect::<Vec<_>>(), vec![3, 4, 5]);
        assert_eq!(a.ensemble.len(), 6);
        a.op_fit(&cfg, 3, &mut ctx).unwrap();
        assert_eq!(a.ensemble.len(), 7);
        assert_eq!(a.next_counter, 9);
    }

    #[test]
    fn fit_on_empty_train_is_skipped() {
        let mut nodes = small_nodes(2);
        nodes[0].train = LabeledDataset::empty(nodes[0].train.dim());
        let cfg = small_cfg(Topology::disconnected(2));
        let mut h = harness(&nodes, &cfg);
        let before = h.ledger.len();
        let mut ctx = ProcessContext {
            ledger: &mut h.ledger,
            process_id: "p",
        };
        assert!(h.agents[0].op_fit(&cfg, 1, &mut ctx).unwrap().is_empty());
        assert_eq!(h.ledger.len(), before);
    }

    #[test]
    fn share_overwrites_and_get_is_idempotent() {
        let nodes = small_nodes(2);
        let cfg = small_cfg(Topology::ring(2));
        let mut h = harness(&nodes, &cfg);
        let mut ctx = ProcessContext {
            ledger: &mut h.ledger,
            process_id: "p",
        };
        let (left, right) = h.agents.split_at_mut(1);
        let (a, b) = (&mut left[0], &mut right[0]);
        a.op_fit(&cfg, 1, &mut ctx).unwrap();
        b.op_fit(&cfg, 1, &mut ctx).unwrap();

        assert!(a.op_share(&[], &cfg, 1, &mut ctx).unwrap().is_empty());

        for (_, p) in a.op_share(&[b.node_id], &cfg, 1, &mut ctx).unwrap() {
            b.registry.write(p);
        }
        a.op_fit(&cfg, 2, &mut ctx).unwrap();
        for (_, p) in a.op_share(&[b.node_id], &cfg, 2, &mut ctx).unwrap() {
            b.registry.write(p);
        }
        assert_eq!(b.registry.len(), 1);
        assert_eq!(b.registry.slot(a.node_id).unwrap().payload.round, 2);
        assert!(b.registry.total_trees() <= cfg.n_share);

        let got = b.op_get(&cfg, 2, &mut ctx).unwrap();
        assert_eq!(got.received, 2);
        let ids = b.ensemble.ids();
        let again = b.op_get(&cfg, 2, &mut ctx).unwrap();
        assert_eq!(again, GetOutcome::default());
        assert_eq!(b.ensemble.ids(), ids);
    }

    #[test]
    fn tampered_payload_is_discarded_and_logged() {
        let nodes = small_nodes(2);
        let cfg = small_cfg(Topology::ring(2));
        let mut h = harness(&nodes, &cfg);
        let mut ctx = ProcessContext {
            ledger: &mut h.ledger,
            process_id: "p",
        };
        let (left, right) = h.agents.split_at_mut(1);
        let (a, b) = (&mut left[0], &mut right[0]);
        a.op_fit(&cfg, 1, &mut ctx).unwrap();
        let mut writes = a.op_share(&[b.node_id], &cfg, 1, &mut ctx).unwrap();
        let (_, mut payload) = writes.pop().unwrap();
        payload.trees[0][30] ^= 0x01;
        b.registry.write(payload);
        let got = b.op_get(&cfg, 1, &mut ctx).unwrap();
        assert_eq!(got.incidents, vec![GetIncident::BadSignature { sender: a.node_id }]);
        assert!(b.ensemble.is_empty());
        let incidents = h
            .ledger
            .records()
            .iter()
            .filter(|r| matches!(r.decoded(), Ok(crate::ledger::Payload::Execution(x)) if x.kind == ExecutionKind::Incident))
            .count();
        assert_eq!(incidents, 1);
        assert!(h.ledger.verify().is_ok());
        let _ = &h.authority;
    }

    #[test]
    fn config_mismatch_rejected() {
        let nodes = small_nodes(3);
        let cfg = small_cfg(Topology::ring(4));
        assert!(run_experiment(&nodes, &cfg).is_err());
        let mut bad = small_cfg(Topology::ring(3));
        bad.n_share = bad.n_max + 1;
        assert!(run_experiment(&nodes, &bad).is_err());
    }

    #[test]
    fn event_list_scheduler_keeps_invariants() {
        let nodes = small_nodes(4);
        let cfg = FederationConfig {
            scheduler: Scheduler::EventList,
            ..small_cfg(Topology::complete(4))
        };
        let mut checks = 0;
        let out = run_experiment_with(&nodes, &cfg, |ev| {
            checks += 1;
            for a in ev.agents {
                assert!(a.ensemble.len() <= cfg.n_max);
                assert!(a.registry.total_trees() <= cfg.n_share * 4);
            }
        })
        .unwrap();
        assert_eq!(checks, 4 * 3 * 3);
        assert!(out.ledger.verify().is_ok());
        let again = run_experiment(&nodes, &cfg).unwrap();
        assert_eq!(out.snapshots, again.snapshots);
    }

    #[test]
    fn disconnected_matches_standalone() {
        let nodes = small_nodes(3);
        let cfg = small_cfg(Topology::disconnected(3));
        let out = run_experiment(&nodes, &cfg).unwrap();
        for (agent, node) in out.agents.iter().zip(&nodes) {
            let alone = standalone_fit(node, &cfg).unwrap();
            assert_eq!(agent.ensemble.members(), alone.members());
        }
    }
}
