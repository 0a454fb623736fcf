//! Classification metrics, improvement over the disconnected baseline, and
//! the estimator provenance matrix.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::Snapshot;
use crate::tree::NodeId;

/// Scores strictly above this are anomalous.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion(scores: &[f64], labels: &[u8]) -> Result<ConfusionCounts> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: scores.len(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s > DECISION_THRESHOLD, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricFlags {
    /// No positive examples: recall and its BAcc half were set to 0.
    pub no_positives: bool,
    /// No negative examples: the specificity half of BAcc was set to 0.
    pub no_negatives: bool,
    /// Nothing predicted positive: precision was set to 0.
    pub no_predicted_positives: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub bacc: f64,
    pub prec: f64,
    pub rec: f64,
    pub flags: MetricFlags,
}

impl Metrics {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::BAcc => self.bacc,
            Metric::Prec => self.prec,
            Metric::Rec => self.rec,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    BAcc,
    Prec,
    Rec,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::BAcc, Metric::Prec, Metric::Rec];

    pub fn name(self) -> &'static str {
        match self {
            Metric::BAcc => "bacc",
            Metric::Prec => "prec",
            Metric::Rec => "rec",
        }
    }
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// Balanced accuracy, precision and recall. Zero denominators yield 0 and
/// raise the matching flag.
pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let (prec, no_pred) = ratio(c.tp, c.tp + c.fp);
    let (rec, no_pos) = ratio(c.tp, c.tp + c.fn_);
    let (spec, no_neg) = ratio(c.tn, c.tn + c.fp);
    Metrics {
        bacc: 0.5 * (rec + spec),
        prec,
        rec,
        flags: MetricFlags {
            no_positives: no_pos,
            no_negatives: no_neg,
            no_predicted_positives: no_pred,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub node: NodeId,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub median: f64,
}

pub fn aggregate(values: &[f64]) -> Aggregate {
    if values.is_empty() {
        return Aggregate { mean: 0.0, median: 0.0 };
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    Aggregate {
        mean: v.iter().sum::<f64>() / n as f64,
        median,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub round: u32,
    pub split: Split,
    pub per_node: Vec<NodeMetrics>,
    pub aggregates: BTreeMap<Metric, Aggregate>,
}

fn final_round(snapshots: &[Snapshot]) -> Result<u32> {
    snapshots
        .iter()
        .map(|s| s.round)
        .max()
        .ok_or_else(|| Error::InvalidArgument("no snapshots".into()))
}

fn at_round(snapshots: &[Snapshot], round: u32) -> Result<BTreeMap<NodeId, &Snapshot>> {
    let map: BTreeMap<NodeId, &Snapshot> = snapshots.iter().filter(|s| s.round == round).map(|s| (s.node, s)).collect();
    if map.is_empty() {
        return Err(Error::InvalidArgument(format!("no snapshots for round {round}")));
    }
    Ok(map)
}

/// Per-node metrics at `round` (the last round when `None`). Test metrics
/// use the shared central test set; train metrics each node's own train set.
pub fn metrics_report(snapshots: &[Snapshot], round: Option<u32>, split: Split) -> Result<MetricsReport> {
    let round = match round {
        Some(r) => r,
        None => final_round(snapshots)?,
    };
    let per_node: Vec<NodeMetrics> = at_round(snapshots, round)?
        .into_values()
        .map(|s| NodeMetrics {
            node: s.node,
            metrics: metrics(match split {
                Split::Train => &s.train_confusion,
                Split::Test => &s.test_confusion,
            }),
        })
        .collect();
    let aggregates = Metric::ALL
        .iter()
        .map(|&m| {
            let vals: Vec<f64> = per_node.iter().map(|n| n.metrics.get(m)).collect();
            (m, aggregate(&vals))
        })
        .collect();
    Ok(MetricsReport {
        round,
        split,
        per_node,
        aggregates,
    })
}

/// One row per (round, node, split) with metrics and raw counts.
pub fn write_metrics_csv<W: Write>(snapshots: &[Snapshot], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["round", "node", "split", "bacc", "prec", "rec", "tp", "fp", "tn", "fn"])?;
    for s in snapshots {
        for (split, c) in [(Split::Train, &s.train_confusion), (Split::Test, &s.test_confusion)] {
            let m = metrics(c);
            w.write_record([
                s.round.to_string(),
                s.node.to_string(),
                split.name().to_string(),
                format!("{:.6}", m.bacc),
                format!("{:.6}", m.prec),
                format!("{:.6}", m.rec),
                c.tp.to_string(),
                c.fp.to_string(),
                c.tn.to_string(),
                c.fn_.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<metrics csv>", e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeDelta {
    pub node: NodeId,
    pub federated: Metrics,
    pub baseline: Metrics,
}

impl NodeDelta {
    pub fn delta(&self, m: Metric) -> f64 {
        self.federated.get(m) - self.baseline.get(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaSummary {
    pub mean: f64,
    pub median: f64,
    pub min_node: NodeId,
    pub min: f64,
    pub max_node: NodeId,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitImprovement {
    pub split: Split,
    pub per_node: Vec<NodeDelta>,
    pub summary: BTreeMap<Metric, DeltaSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementReport {
    pub round: u32,
    pub test: SplitImprovement,
    pub train: SplitImprovement,
}

impl ImprovementReport {
    pub fn split(&self, split: Split) -> &SplitImprovement {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["split", "node", "metric", "federated", "baseline", "delta"])?;
        for part in [&self.test, &self.train] {
            for d in &part.per_node {
                for m in Metric::ALL {
                    w.write_record([
                        part.split.name().to_string(),
                        d.node.to_string(),
                        m.name().to_string(),
                        format!("{:.6e}", d.federated.get(m)),
                        format!("{:.6e}", d.baseline.get(m)),
                        format!("{:.6e}", d.delta(m)),
                    ])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("<improvement csv>", e))?;
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["split", "metric", "mean", "median", "min_node", "min", "max_node", "max"])?;
        for part in [&self.test, &self.train] {
            for (m, s) in &part.summary {
                w.write_record([
                    part.split.name().to_string(),
                    m.name().to_string(),
                    format!("{:.6e}", s.mean),
                    format!("{:.6e}", s.median),
                    s.min_node.to_string(),
                    format!("{:.6e}", s.min),
                    s.max_node.to_string(),
                    format!("{:.6e}", s.max),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<improvement csv>", e))?;
        Ok(())
    }
}

fn split_improvement(
    split: Split,
    run: &BTreeMap<NodeId, &Snapshot>,
    base: &BTreeMap<NodeId, &Snapshot>,
) -> SplitImprovement {
    let pick = |s: &Snapshot| match split {
        Split::Train => metrics(&s.train_confusion),
        Split::Test => metrics(&s.test_confusion),
    };
    let per_node: Vec<NodeDelta> = run
        .iter()
        .map(|(node, s)| NodeDelta {
            node: *node,
            federated: pick(s),
            baseline: pick(base[node]),
        })
        .collect();
    let summary = Metric::ALL
        .iter()
        .map(|&m| {
            let deltas: Vec<f64> = per_node.iter().map(|d| d.delta(m)).collect();
            let agg = aggregate(&deltas);
            let (mut min_i, mut max_i) = (0, 0);
            for (i, &v) in deltas.iter().enumerate() {
                if v < deltas[min_i] {
                    min_i = i;
                }
                if v > deltas[max_i] {
                    max_i = i;
                }
            }
            (
                m,
                DeltaSummary {
                    mean: agg.mean,
                    median: agg.median,
                    min_node: per_node[min_i].node,
                    min: deltas[min_i],
                    max_node: per_node[max_i].node,
                    max: deltas[max_i],
                },
            )
        })
        .collect();
    SplitImprovement {
        split,
        per_node,
        summary,
    }
}

/// `metric(federated) - metric(baseline)` per node at the last round of each run.
pub fn improvement_report(run: &[Snapshot], baseline: &[Snapshot]) -> Result<ImprovementReport> {
    let round = final_round(run)?;
    let r = at_round(run, round)?;
    let b = at_round(baseline, final_round(baseline)?)?;
    if r.keys().ne(b.keys()) {
        return Err(Error::InvalidArgument("run and baseline cover different nodes".into()));
    }
    if r.values().zip(b.values()).any(|(x, y)| x.test_confusion.total() != y.test_confusion.total()) {
        return Err(Error::InvalidArgument("run and baseline were evaluated on different test sets".into()));
    }
    Ok(ImprovementReport {
        round,
        test: split_improvement(Split::Test, &r, &b),
        train: split_improvement(Split::Train, &r, &b),
    })
}

/// Row `j`, column `i`: percentage of node `j`'s estimators created by node `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceMatrix {
    pub nodes: Vec<NodeId>,
    pub percent: Vec<Vec<f64>>,
}

impl ProvenanceMatrix {
    pub fn get(&self, holder: NodeId, origin: NodeId) -> f64 {
        let j = self.nodes.binary_search(&holder).expect("unknown holder");
        let i = self.nodes.binary_search(&origin).expect("unknown origin");
        self.percent[j][i]
    }

    pub fn is_diagonal(&self) -> bool {
        self.percent
            .iter()
            .enumerate()
            .all(|(j, row)| row.iter().enumerate().all(|(i, &p)| i == j || p == 0.0))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["holder".to_string()];
        header.extend(self.nodes.iter().map(|n| n.to_string()));
        w.write_record(&header)?;
        for (j, row) in self.percent.iter().enumerate() {
            let mut rec = vec![self.nodes[j].to_string()];
            rec.extend(row.iter().map(|p| format!("{p:.4}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<provenance csv>", e))?;
        Ok(())
    }
}

pub fn provenance_matrix(snapshots: &[Snapshot], round: u32) -> Result<ProvenanceMatrix> {
    let at = at_round(snapshots, round)?;
    let nodes: Vec<NodeId> = at.keys().copied().collect();
    let percent = at
        .values()
        .map(|s| {
            let total = s.ensemble.len();
            nodes
                .iter()
                .map(|origin| {
                    if total == 0 {
                        return 0.0;
                    }
                    let c = s.ensemble.iter().filter(|id| id.origin == *origin).count();
                    100.0 * c as f64 / total as f64
                })
                .collect()
        })
        .collect();
    Ok(ProvenanceMatrix { nodes, percent })
}
