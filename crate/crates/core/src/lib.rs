//! Federated random forests for anomaly detection without sharing data.
//!
//! Each agent trains decision trees on its own records, ranks its trees with
//! a greedy Gaussian-process criterion over a subtree-counting kernel, and
//! sends its best trees to its neighbours. Every training and sharing step is
//! logged to a signed, hash-chained ledger.

pub mod data;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod federation;
pub mod ledger;
pub mod ranking;
pub mod seeding;
pub mod tree;
pub mod treekernel;

pub use data::{LabeledDataset, NodeDataset, PartitionSpec};
pub use ensemble::{Ensemble, PredictionMode, Ranker};
pub use error::{Error, Result};
pub use federation::{run_experiment, FederationConfig, Snapshot, Topology, TopologySpec};
pub use ledger::{Ledger, LedgerRecord};
pub use ranking::{p_greedy_rank, Ranking};
pub use tree::{DecisionTree, EstimatorId, NodeId, TreeTrainConfig};
pub use treekernel::{gram, tree_kernel, GramMatrix, KernelConfig};
