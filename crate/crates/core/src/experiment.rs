//! Run configuration files and the on-disk layout of a run.
//!
//! A run directory holds:
//!
//! - `config.json` — the resolved [`RunConfig`]
//! - `manifest.json` — partition statistics and the choices the run depended on
//! - `snapshots.jsonl` — one [`Snapshot`] per node and round
//! - `ledger.jsonl` — the signed record chain
//! - `ensembles/NodeXX.fens` — final ensembles

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    load_csv, prepare_nodes, synth_generate_with, withhold_positives, LabeledDataset, NodeDataset, PartitionManifest,
    PartitionSpec, SynthSpec, DEFAULT_LABEL_COLUMN,
};
use crate::ensemble::{PredictionMode, Ranker};
use crate::error::{Error, Result};
use crate::federation::{run_experiment, write_snapshots, FederationConfig, RunOutput, Scheduler, Snapshot, TopologySpec};
use crate::ledger::Ledger;
use crate::tree::{NodeId, TreeTrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum DatasetSource {
    Csv {
        path: PathBuf,
        #[serde(default = "default_label")]
        label_column: String,
    },
    Synthetic(SynthSpec),
}

fn default_label() -> String {
    DEFAULT_LABEL_COLUMN.to_string()
}

impl DatasetSource {
    /// A CSV path, or `synthetic` for generated data with `rows` rows.
    pub fn parse(arg: &str, seed: u64) -> Self {
        if arg == "synthetic" {
            DatasetSource::Synthetic(SynthSpec::new(100_000, 10, 0.002, seed))
        } else {
            DatasetSource::Csv {
                path: arg.into(),
                label_column: default_label(),
            }
        }
    }

    pub fn load(&self) -> Result<LabeledDataset> {
        match self {
            DatasetSource::Csv { path, label_column } => load_csv(path, label_column),
            DatasetSource::Synthetic(spec) => synth_generate_with(spec),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub partition: PartitionSpec,
    /// Nodes whose training anomalies are moved to their test split.
    #[serde(default)]
    pub withhold_positives: Vec<NodeId>,
    pub topology: TopologySpec,
    #[serde(default = "ten")]
    pub n_new: usize,
    #[serde(default = "fifty")]
    pub n_max: usize,
    #[serde(default = "ten")]
    pub n_share: usize,
    #[serde(default = "four")]
    pub rounds: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tree: TreeTrainConfig,
    #[serde(default)]
    pub ranker: Ranker,
    #[serde(default)]
    pub prediction_mode: PredictionMode,
    #[serde(default)]
    pub scheduler: Scheduler,
}

fn ten() -> usize {
    10
}
fn fifty() -> usize {
    50
}
fn four() -> u32 {
    4
}

impl RunConfig {
    pub fn new(dataset: DatasetSource, topology: TopologySpec, seed: u64) -> Self {
        Self {
            dataset,
            partition: PartitionSpec {
                seed,
                ..PartitionSpec::default()
            },
            withhold_positives: Vec::new(),
            topology,
            n_new: 10,
            n_max: 50,
            n_share: 10,
            rounds: 4,
            seed,
            tree: TreeTrainConfig::default(),
            ranker: Ranker::default(),
            prediction_mode: PredictionMode::Average,
            scheduler: Scheduler::Synchronous,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn nodes(&self) -> Result<Vec<NodeDataset>> {
        let data = self.dataset.load()?;
        let mut nodes = prepare_nodes(&data, &self.partition)?;
        for &n in &self.withhold_positives {
            withhold_positives(&mut nodes, n)?;
        }
        Ok(nodes)
    }

    pub fn federation(&self, n_nodes: usize) -> Result<FederationConfig> {
        let cfg = FederationConfig {
            n_new: self.n_new,
            n_max: self.n_max,
            n_share: self.n_share,
            rounds: self.rounds,
            topology: self.topology.build(n_nodes)?,
            tree_cfg: self.tree,
            ranker: self.ranker.clone(),
            prediction_mode: self.prediction_mode,
            scheduler: self.scheduler,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Choices a reader needs to interpret the outputs of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub partition: PartitionManifest,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub features_per_split: usize,
    pub schedule: String,
    pub ranking_fallback: String,
    pub process_id: String,
    pub ledger_records: usize,
    pub ledger_head: String,
}

pub struct RunArtifacts {
    pub output: RunOutput,
    pub manifest: RunManifest,
}

pub fn execute(cfg: &RunConfig, nodes: &[NodeDataset]) -> Result<RunArtifacts> {
    let fed = cfg.federation(nodes.len())?;
    let output = run_experiment(nodes, &fed)?;
    let d = nodes.first().map_or(0, |n| n.train.dim());
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        partition: PartitionManifest::new(cfg.partition, nodes)?,
        max_depth: cfg.tree.max_depth,
        min_samples_leaf: cfg.tree.min_samples_leaf,
        features_per_split: cfg.tree.features_for(d),
        schedule: match cfg.scheduler {
            Scheduler::Synchronous => "per round: all FIT, then all SHARE, then all GET".into(),
            Scheduler::EventList => "per round: FIT, SHARE, GET at random per-agent times".into(),
        },
        ranking_fallback: "trees left once residual variance vanishes are appended in (origin, counter) order".into(),
        process_id: output.process_id.clone(),
        ledger_records: output.ledger.len(),
        ledger_head: hex::encode(output.ledger.head_hash()),
    };
    Ok(RunArtifacts { output, manifest })
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes every artifact of a finished run into `dir`.
pub fn write_run(dir: impl AsRef<Path>, cfg: &RunConfig, run: &RunArtifacts) -> Result<()> {
    let dir = dir.as_ref();
    let ens_dir = dir.join("ensembles");
    fs::create_dir_all(&ens_dir).map_err(|e| Error::io(&ens_dir, e))?;
    write_json(dir.join("config.json"), cfg)?;
    write_json(dir.join("manifest.json"), &run.manifest)?;
    let snap_path = dir.join("snapshots.jsonl");
    let file = fs::File::create(&snap_path).map_err(|e| Error::io(&snap_path, e))?;
    write_snapshots(&run.output.snapshots, std::io::BufWriter::new(file))?;
    run.output.ledger.save(dir.join("ledger.jsonl"))?;
    for a in &run.output.agents {
        a.ensemble.save(ens_dir.join(format!("{}.fens", a.node_id)), Some(cfg.rounds))?;
    }
    Ok(())
}

pub fn read_run(dir: impl AsRef<Path>) -> Result<(Vec<Snapshot>, Ledger)> {
    let dir = dir.as_ref();
    Ok((
        crate::federation::read_snapshots(dir.join("snapshots.jsonl"))?,
        Ledger::load(dir.join("ledger.jsonl"))?,
    ))
}
