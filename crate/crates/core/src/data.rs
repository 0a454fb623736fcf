//! Dataset loading, synthetic generation, and the unbalanced federated split.
//!
//! Rows are stored row-major as `Vec<f64>`; labels are `0` (normal) or `1`
//! (anomalous).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::rng_from;
use crate::tree::NodeId;

pub const DEFAULT_LABEL_COLUMN: &str = "Class";

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    rows: Vec<Vec<f64>>,
    labels: Vec<u8>,
    d: usize,
}

impl LabeledDataset {
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<u8>, d: usize) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        for (i, (row, &label)) in rows.iter().zip(&labels).enumerate() {
            if row.len() != d {
                return Err(Error::BadRow {
                    row: i,
                    reason: format!("expected {d} features, found {}", row.len()),
                });
            }
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::BadRow {
                    row: i,
                    reason: format!("non-finite value in column {j}"),
                });
            }
            if label > 1 {
                return Err(Error::BadRow {
                    row: i,
                    reason: format!("label {label} is not 0 or 1"),
                });
            }
        }
        Ok(Self { rows, labels, d })
    }

    pub fn empty(d: usize) -> Self {
        Self {
            rows: Vec::new(),
            labels: Vec::new(),
            d,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }

    pub fn fraud_ratio(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.positives() as f64 / self.len() as f64
        }
    }

    /// Copies out the rows at `indices`, in that order. Repeats are allowed.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            d: self.d,
        }
    }

    /// Appends `other` to `self`. Both must share the feature count.
    pub fn extend(&mut self, other: &LabeledDataset) -> Result<()> {
        if other.d != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: other.d,
            });
        }
        self.rows.extend(other.rows.iter().cloned());
        self.labels.extend_from_slice(&other.labels);
        Ok(())
    }

    /// Per-feature population standard deviation. Constant features get 1.0.
    pub fn feature_std(&self) -> Vec<f64> {
        let m = self.len() as f64;
        (0..self.d)
            .map(|j| {
                if self.is_empty() {
                    return 1.0;
                }
                let mean = self.rows.iter().map(|r| r[j]).sum::<f64>() / m;
                let var = self.rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / m;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect()
    }
}

/// Loads a comma-separated file with a header row. Every column except
/// `label_column` becomes a feature, in file order.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| Error::MissingLabelColumn(label_column.to_string()))?;
    let d = headers.len() - 1;

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::BadRow {
                row: row_idx,
                reason: format!("expected {} cells, found {}", headers.len(), record.len()),
            });
        }
        let mut row = Vec::with_capacity(d);
        for (col, cell) in record.iter().enumerate() {
            let value: f64 = cell.trim().parse().map_err(|_| Error::BadRow {
                row: row_idx,
                reason: format!("non-numeric cell `{cell}` in column `{}`", &headers[col]),
            })?;
            if col == label_idx {
                let label = if value == 0.0 {
                    0
                } else if value == 1.0 {
                    1
                } else {
                    return Err(Error::BadRow {
                        row: row_idx,
                        reason: format!("label `{cell}` is not 0 or 1"),
                    });
                };
                labels.push(label);
            } else {
                if !value.is_finite() {
                    return Err(Error::BadRow {
                        row: row_idx,
                        reason: format!("non-finite cell in column `{}`", &headers[col]),
                    });
                }
                row.push(value);
            }
        }
        rows.push(row);
    }
    LabeledDataset::new(rows, labels, d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub n_parts: usize,
    /// Maximum relative deviation of a part's size from the mean size.
    pub imbalance: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self {
            n_parts: 20,
            imbalance: 0.7,
            train_fraction: 0.9,
            seed: 0,
        }
    }
}

/// Target part sizes: relative deviations are drawn in `[-imbalance, imbalance]`,
/// centred to sum to zero, and shrunk if centring pushed any past the bound.
/// Cumulative rounding keeps every size within one example of its target.
pub fn unbalanced_sizes(m: usize, spec: &PartitionSpec) -> Result<Vec<usize>> {
    let n = spec.n_parts;
    if n == 0 {
        return Err(Error::InvalidArgument("n_parts must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&spec.imbalance) {
        return Err(Error::InvalidArgument(format!(
            "imbalance {} outside [0, 1)",
            spec.imbalance
        )));
    }
    if n > m {
        return Err(Error::InvalidArgument(format!(
            "cannot split {m} examples into {n} parts"
        )));
    }
    let mut rng = rng_from(spec.seed, &[0x5149]);
    let mut dev: Vec<f64> = (0..n)
        .map(|_| {
            if spec.imbalance > 0.0 {
                rng.gen_range(-spec.imbalance..=spec.imbalance)
            } else {
                0.0
            }
        })
        .collect();
    let mean = dev.iter().sum::<f64>() / n as f64;
    dev.iter_mut().for_each(|x| *x -= mean);
    let worst = dev.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if worst > spec.imbalance {
        let shrink = spec.imbalance / worst;
        dev.iter_mut().for_each(|x| *x *= shrink);
    }

    let mean_size = m as f64 / n as f64;
    let mut sizes = Vec::with_capacity(n);
    let mut cumulative = 0.0;
    let mut prev_boundary = 0usize;
    for (i, x) in dev.iter().enumerate() {
        cumulative += mean_size * (1.0 + x);
        let boundary = if i + 1 == n {
            m
        } else {
            (cumulative.round() as usize).clamp(prev_boundary, m)
        };
        sizes.push(boundary - prev_boundary);
        prev_boundary = boundary;
    }
    Ok(sizes)
}

/// Splits `ds` into `spec.n_parts` disjoint parts of unequal size by a single
/// shuffled pass. Classes are not stratified.
pub fn partition_unbalanced(ds: &LabeledDataset, spec: &PartitionSpec) -> Result<Vec<LabeledDataset>> {
    let sizes = unbalanced_sizes(ds.len(), spec)?;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng_from(spec.seed, &[0x5348]));
    let mut parts = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for size in sizes {
        let mut idx = order[start..start + size].to_vec();
        idx.sort_unstable();
        parts.push(ds.select(&idx));
        start += size;
    }
    Ok(parts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeDataset {
    pub node_id: NodeId,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// Shuffles `part` and keeps `round(train_fraction * m)` rows for training.
pub fn split_train_test(
    node_id: NodeId,
    part: &LabeledDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<NodeDataset> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_fraction {train_fraction} outside (0, 1)"
        )));
    }
    let m = part.len();
    let n_train = ((train_fraction * m as f64).round() as usize).min(m);
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng_from(seed, &[0x5454, node_id.0 as u64]));
    let (train_idx, test_idx) = order.split_at(n_train);
    let mut train_idx = train_idx.to_vec();
    let mut test_idx = test_idx.to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok(NodeDataset {
        node_id,
        train: part.select(&train_idx),
        test: part.select(&test_idx),
    })
}

/// Partition followed by a per-node train/test split; node ids are `0..n_parts`.
pub fn prepare_nodes(ds: &LabeledDataset, spec: &PartitionSpec) -> Result<Vec<NodeDataset>> {
    partition_unbalanced(ds, spec)?
        .iter()
        .enumerate()
        .map(|(i, part)| split_train_test(NodeId(i as u32), part, spec.train_fraction, spec.seed))
        .collect()
}

/// Moves every positive training row of `node` into its test split, leaving
/// the node with no anomalies to learn from.
pub fn withhold_positives(nodes: &mut [NodeDataset], node: NodeId) -> Result<usize> {
    let n = nodes
        .iter_mut()
        .find(|n| n.node_id == node)
        .ok_or_else(|| Error::InvalidArgument(format!("no node {node}")))?;
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..n.train.len()).partition(|&i| n.train.labels()[i] == 1);
    n.test.extend(&n.train.select(&pos))?;
    n.train = n.train.select(&neg);
    Ok(pos.len())
}

/// Joins every node's test split into one shared evaluation set.
pub fn build_central_test(nodes: &[NodeDataset]) -> Result<LabeledDataset> {
    let first = nodes
        .first()
        .ok_or_else(|| Error::InvalidArgument("no nodes".into()))?;
    let mut central = LabeledDataset::empty(first.test.dim());
    for node in nodes {
        if node.train.dim() != central.dim() {
            return Err(Error::DimensionMismatch {
                expected: central.dim(),
                got: node.train.dim(),
            });
        }
        central.extend(&node.test)?;
    }
    Ok(central)
}

/// Shape of the synthetic two-class data. Normal rows are standard
/// Gaussian. Every anomaly carries a shared signature on a few features plus
/// one of several pattern-specific shifts on others, so a node holding few
/// anomalies sees only some patterns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "SynthSpecFields")]
pub struct SynthSpec {
    pub rows: usize,
    pub dim: usize,
    pub fraud_ratio: f64,
    pub patterns: usize,
    /// Features carrying the shared signature, and features per pattern.
    pub shifted_features: usize,
    /// Range of the absolute shared shift.
    pub common_shift: (f64, f64),
    /// Range of the absolute pattern shift.
    pub pattern_shift: (f64, f64),
    /// Standard deviation of anomalies around their shifted mean.
    pub anomaly_scale: f64,
    /// Fraction of normal rows drawn with standard deviation `outlier_scale`
    /// instead of 1 (heavy-tailed legitimate behaviour).
    pub outlier_fraction: f64,
    pub outlier_scale: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(rows: usize, dim: usize, fraud_ratio: f64, seed: u64) -> Self {
        Self {
            rows,
            dim,
            fraud_ratio,
            patterns: 12,
            shifted_features: dim.div_ceil(4),
            common_shift: (2.5, 3.5),
            pattern_shift: (2.0, 4.0),
            anomaly_scale: 0.8,
            outlier_fraction: 0.01,
            outlier_scale: 3.0,
            seed,
        }
    }
}

/// `SynthSpec` as written in config files: only size, ratio and seed are
/// required, the rest fall back to [`SynthSpec::new`].
#[derive(Deserialize)]
struct SynthSpecFields {
    rows: usize,
    dim: usize,
    fraud_ratio: f64,
    #[serde(default)]
    seed: u64,
    patterns: Option<usize>,
    shifted_features: Option<usize>,
    common_shift: Option<(f64, f64)>,
    pattern_shift: Option<(f64, f64)>,
    anomaly_scale: Option<f64>,
    outlier_fraction: Option<f64>,
    outlier_scale: Option<f64>,
}

impl From<SynthSpecFields> for SynthSpec {
    fn from(f: SynthSpecFields) -> Self {
        let d = SynthSpec::new(f.rows, f.dim, f.fraud_ratio, f.seed);
        SynthSpec {
            patterns: f.patterns.unwrap_or(d.patterns),
            shifted_features: f.shifted_features.unwrap_or(d.shifted_features),
            common_shift: f.common_shift.unwrap_or(d.common_shift),
            pattern_shift: f.pattern_shift.unwrap_or(d.pattern_shift),
            anomaly_scale: f.anomaly_scale.unwrap_or(d.anomaly_scale),
            outlier_fraction: f.outlier_fraction.unwrap_or(d.outlier_fraction),
            outlier_scale: f.outlier_scale.unwrap_or(d.outlier_scale),
            ..d
        }
    }
}

pub fn synth_generate(m: usize, d: usize, fraud_ratio: f64, seed: u64) -> Result<LabeledDataset> {
    synth_generate_with(&SynthSpec::new(m, d, fraud_ratio, seed))
}

pub fn synth_generate_with(spec: &SynthSpec) -> Result<LabeledDataset> {
    let (m, d, fraud_ratio) = (spec.rows, spec.dim, spec.fraud_ratio);
    if !(fraud_ratio > 0.0 && fraud_ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraud_ratio {fraud_ratio} outside (0, 1)"
        )));
    }
    if d == 0 || spec.patterns == 0 {
        return Err(Error::InvalidArgument("d and patterns must be at least 1".into()));
    }
    let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo < hi;
    if !ordered(spec.common_shift) || !ordered(spec.pattern_shift) || spec.anomaly_scale.is_nan() || spec.anomaly_scale < 0.0 {
        return Err(Error::InvalidArgument("shift ranges must be 0 <= lo < hi and scale >= 0".into()));
    }
    if !(0.0..=1.0).contains(&spec.outlier_fraction) || spec.outlier_scale.is_nan() || spec.outlier_scale <= 0.0 {
        return Err(Error::InvalidArgument("outlier_fraction must be in [0, 1] and outlier_scale positive".into()));
    }
    let n_pos = (m as f64 * fraud_ratio).round() as usize;
    if n_pos == 0 {
        return Err(Error::InvalidArgument(format!(
            "m * fraud_ratio = {} rounds to zero anomalies",
            m as f64 * fraud_ratio
        )));
    }
    let mut rng = rng_from(spec.seed, &[0x5359]);

    let k = spec.shifted_features.clamp(1, d);
    let mut feats: Vec<usize> = (0..d).collect();
    feats.shuffle(&mut rng);
    let draw = |rng: &mut ChaCha8Rng, js: &[usize], (lo, hi): (f64, f64)| -> Vec<(usize, f64)> {
        js.iter()
            .map(|&j| {
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                (j, sign * rng.gen_range(lo..hi))
            })
            .collect()
    };
    let common = draw(&mut rng, &feats[..k], spec.common_shift);
    let rest = &feats[k..];
    let patterns: Vec<Vec<(usize, f64)>> = (0..spec.patterns)
        .map(|_| {
            let mut js = rest.to_vec();
            js.shuffle(&mut rng);
            let mut p = common.clone();
            p.extend(draw(&mut rng, &js[..k.min(js.len())], spec.pattern_shift));
            p
        })
        .collect();

    let mut rows = Vec::with_capacity(m);
    let mut labels = Vec::with_capacity(m);
    for i in 0..m {
        let mut row: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        if i < n_pos {
            for &(j, shift) in &patterns[i % spec.patterns] {
                row[j] = row[j] * spec.anomaly_scale + shift;
            }
            labels.push(1);
        } else {
            if rng.gen_bool(spec.outlier_fraction) {
                row.iter_mut().for_each(|v| *v *= spec.outlier_scale);
            }
            labels.push(0);
        }
        rows.push(row);
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng);
    let ds = LabeledDataset { rows, labels, d };
    Ok(ds.select(&order))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub samples: usize,
    pub frauds: usize,
    pub fraud_ratio: f64,
}

impl SplitStats {
    pub fn of(ds: &LabeledDataset) -> Self {
        Self {
            samples: ds.len(),
            frauds: ds.positives(),
            fraud_ratio: ds.fraud_ratio(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeStats {
    pub node: NodeId,
    pub train: SplitStats,
    pub test: SplitStats,
}

/// Per-node dataset sizes and fraud counts, plus the joined test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub spec: PartitionSpec,
    pub nodes: Vec<NodeStats>,
    pub central_test: SplitStats,
}

impl PartitionManifest {
    pub fn new(spec: PartitionSpec, nodes: &[NodeDataset]) -> Result<Self> {
        let central = build_central_test(nodes)?;
        Ok(Self {
            spec,
            nodes: nodes
                .iter()
                .map(|n| NodeStats {
                    node: n.node_id,
                    train: SplitStats::of(&n.train),
                    test: SplitStats::of(&n.test),
                })
                .collect(),
            central_test: SplitStats::of(&central),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn toy(m: usize) -> LabeledDataset {
        let rows = (0..m).map(|i| vec![i as f64]).collect();
        let labels = (0..m).map(|i| (i % 7 == 0) as u8).collect();
        LabeledDataset::new(rows, labels, 1).unwrap()
    }

    fn write_csv(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_three_rows() {
        let f = write_csv("a,b,Class\n1.0,2.0,0\n3.0,4.0,1\n5.0,6.0,0\n");
        let ds = load_csv(f.path(), "Class").unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.positives(), 1);
        assert_eq!(ds.row(2), &[5.0, 6.0]);
    }

    #[test]
    fn load_header_only() {
        let f = write_csv("Time,V1,Amount,Class\n");
        let ds = load_csv(f.path(), "Class").unwrap();
        assert_eq!(ds.len(), 0);
        assert_eq!(ds.dim(), 3);
    }

    #[test]
    fn load_quoted_label_column_in_middle() {
        let f = write_csv("a,Class,b\n1,\"1\",2\n");
        let ds = load_csv(f.path(), "Class").unwrap();
        assert_eq!(ds.labels(), &[1]);
        assert_eq!(ds.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn load_rejects_bad_label_with_row() {
        let f = write_csv("a,Class\n1,0\n2,2\n");
        match load_csv(f.path(), "Class") {
            Err(Error::BadRow { row, .. }) => assert_eq!(row, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_rejects_non_numeric() {
        let f = write_csv("a,Class\n1,0\nx,1\n");
        assert!(matches!(load_csv(f.path(), "Class"), Err(Error::BadRow { row: 1, .. })));
    }

    #[test]
    fn load_missing_file_and_column() {
        assert!(matches!(load_csv("/nonexistent/x.csv", "Class"), Err(Error::Io { .. })));
        let f = write_csv("a,b\n1,0\n");
        assert!(matches!(load_csv(f.path(), "Class"), Err(Error::MissingLabelColumn(_))));
    }

    #[test]
    fn balanced_partition() {
        let spec = PartitionSpec {
            n_parts: 4,
            imbalance: 0.0,
            train_fraction: 0.9,
            seed: 3,
        };
        let parts = partition_unbalanced(&toy(100), &spec).unwrap();
        assert!(parts.iter().all(|p| p.len() == 25));
    }

    #[test]
    fn too_many_parts_rejected() {
        let spec = PartitionSpec {
            n_parts: 11,
            ..PartitionSpec::default()
        };
        assert!(partition_unbalanced(&toy(10), &spec).is_err());
    }

    #[test]
    fn split_rounding() {
        let ten = split_train_test(NodeId(0), &toy(10), 0.9, 1).unwrap();
        assert_eq!((ten.train.len(), ten.test.len()), (9, 1));
        let one = split_train_test(NodeId(0), &toy(1), 0.9, 1).unwrap();
        assert_eq!((one.train.len(), one.test.len()), (1, 0));
        assert!(split_train_test(NodeId(0), &toy(10), 1.0, 1).is_err());
    }

    #[test]
    fn split_is_disjoint_cover() {
        let part = toy(57);
        let node = split_train_test(NodeId(4), &part, 0.9, 11).unwrap();
        let mut seen: Vec<f64> = node
            .train
            .rows()
            .iter()
            .chain(node.test.rows())
            .map(|r| r[0])
            .collect();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, (0..57).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn central_test_sizes() {
        let a = NodeDataset {
            node_id: NodeId(0),
            train: toy(5),
            test: toy(3),
        };
        let b = NodeDataset {
            node_id: NodeId(1),
            train: toy(5),
            test: toy(4),
        };
        assert_eq!(build_central_test(std::slice::from_ref(&a)).unwrap(), a.test);
        let central = build_central_test(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(central.len(), 7);
        assert_eq!(central.positives(), a.test.positives() + b.test.positives());

        let wide = NodeDataset {
            node_id: NodeId(2),
            train: LabeledDataset::empty(2),
            test: LabeledDataset::empty(2),
        };
        assert!(build_central_test(&[a, wide]).is_err());
    }

    #[test]
    fn synth_counts() {
        assert_eq!(synth_generate(10_000, 10, 0.002, 1).unwrap().positives(), 20);
        assert_eq!(synth_generate(100, 4, 0.5, 1).unwrap().positives(), 50);
        assert!(synth_generate(100, 4, 0.001, 1).is_err());
        assert_eq!(synth_generate(500, 4, 0.1, 9).unwrap(), synth_generate(500, 4, 0.1, 9).unwrap());
    }
}
